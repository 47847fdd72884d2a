//! Scenario configs (`key = value` with `[section]` headers) and the runner that writes CSV/SVG reports.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::constants::{lp_norm, Exponent};
use crate::energy::{check_energy_inequality, equipartition_residual, interface_jump, EnergyReport, Inequality};
use crate::error::{Error, Result};
use crate::fem::{gradient_projection, interpolate_dirichlet, mass_matrix, poisson_solve, Weight};
use crate::manufactured::{l2_error, SineCos};
use crate::material::{ElementMaterial, MaterialSpec};
use crate::mesh::{box_mesh, interval_mesh, rect_mesh, tag_elements, Mesh, Tag};
use crate::model::{Model, ModelKind, State, DEGENERACY_FLOOR};
use crate::stepper::{check_admissibility, fixed_point_outer_with, integrate_with, AdmissibilityBounds, NewtonOptions, SolveMode, Trajectory};
use crate::svg::Plot;

/// Bundled scenarios: (name, config text).
pub const BUNDLED: [(&str, &str); 9] = [
    ("linear_wave_1d", include_str!("../scenarios/linear_wave_1d.cfg")),
    ("plaplace_decay_1d", include_str!("../scenarios/plaplace_decay_1d.cfg")),
    ("fixed_point_viscosity_1d", include_str!("../scenarios/fixed_point_viscosity_1d.cfg")),
    ("potential_viscosity_1d", include_str!("../scenarios/potential_viscosity_1d.cfg")),
    ("lens_acoustic_1d", include_str!("../scenarios/lens_acoustic_1d.cfg")),
    ("elastic_fluid_2d", include_str!("../scenarios/elastic_fluid_2d.cfg")),
    ("elastic_lens_2d", include_str!("../scenarios/elastic_lens_2d.cfg")),
    ("degeneracy_1d", include_str!("../scenarios/degeneracy_1d.cfg")),
    ("mms_viscosity_1d", include_str!("../scenarios/mms_viscosity_1d.cfg")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeshSource {
    Structured { n: Vec<usize>, length: Vec<f64> },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TagBox {
    pub tag: Tag,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshConfig {
    pub dim: usize,
    pub source: MeshSource,
    pub default_tag: Tag,
    pub boxes: Vec<TagBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileKind {
    Zero,
    Sine,
    Tent,
    GaussianBump,
    Bump,
    GradientBump,
    File,
}

impl ProfileKind {
    pub fn name(self) -> &'static str {
        match self {
            ProfileKind::Zero => "ZERO",
            ProfileKind::Sine => "SINE",
            ProfileKind::Tent => "TENT",
            ProfileKind::GaussianBump => "GAUSSIAN_BUMP",
            ProfileKind::Bump => "BUMP",
            ProfileKind::GradientBump => "GRADIENT_BUMP",
            ProfileKind::File => "FILE",
        }
    }
}

impl FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "ZERO" => ProfileKind::Zero,
            "SINE" => ProfileKind::Sine,
            "TENT" => ProfileKind::Tent,
            "GAUSSIAN_BUMP" => ProfileKind::GaussianBump,
            "BUMP" => ProfileKind::Bump,
            "GRADIENT_BUMP" => ProfileKind::GradientBump,
            "FILE" => ProfileKind::File,
            other => return Err(Error::Config(format!("unknown profile '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub kind: ProfileKind,
    pub amplitude: f64,
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitialConfig {
    pub u: Profile,
    pub ut: Profile,
    pub width: Option<f64>,
    pub center: Option<Vec<f64>>,
    /// replace vector data by the gradient of its recovered potential
    pub project_gradient: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub mode: SolveMode,
    pub newton: NewtonOptions,
    pub max_outer: usize,
    pub outer_tol: f64,
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Study {
    None,
    SpatialRefinement { levels: usize, manufactured: bool },
    DtRefinement { levels: usize },
    Decay { window: (f64, f64) },
}

impl Study {
    pub fn name(&self) -> &'static str {
        match self {
            Study::None => "NONE",
            Study::SpatialRefinement { .. } => "SPATIAL_REFINEMENT",
            Study::DtRefinement { .. } => "DT_REFINEMENT",
            Study::Decay { .. } => "DECAY",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checks {
    Auto,
    List(Vec<Inequality>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub snapshots: Option<Vec<f64>>,
    pub checks: Checks,
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ModelKind,
    pub mesh: MeshConfig,
    pub material: ElementMaterial,
    pub per_tag: BTreeMap<Tag, ElementMaterial>,
    pub initial: InitialConfig,
    pub t_final: f64,
    pub dt: f64,
    pub solver: SolverConfig,
    pub admissibility: Option<AdmissibilityBounds>,
    pub study: Study,
    pub output: OutputConfig,
}

fn cfg_err(line: usize, msg: impl Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

/// A number, optionally written as a fraction `a/b`.
pub fn parse_number(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad_number(s))?, b.trim().parse().map_err(|_| bad_number(s))?);
            if b == 0.0 {
                return Err(bad_number(s));
            }
            a / b
        }
        None => s.parse().map_err(|_| bad_number(s))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad_number(s))
    }
}

fn bad_number(s: &str) -> Error {
    Error::Config(format!("'{s}' is not a finite number"))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(parse_number).collect()
}

fn parse_count(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Config(format!("'{}' is not a nonnegative integer", s.trim())))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("'{other}' is not a boolean"))),
    }
}

struct Entry {
    key: String,
    value: String,
    line: usize,
}

/// Sections in file order; each holds its entries in file order.
fn tokenize(text: &str) -> Result<Vec<(String, Vec<Entry>)>> {
    let mut out: Vec<(String, Vec<Entry>)> = vec![(String::new(), Vec::new())];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| cfg_err(line, "unterminated section header"))?.trim();
            if out.iter().any(|(n, _)| n == name) {
                return Err(cfg_err(line, format!("duplicate section [{name}]")));
            }
            out.push((name.to_string(), Vec::new()));
            continue;
        }
        let (k, v) = s.split_once('=').ok_or_else(|| cfg_err(line, format!("expected 'key = value', got '{s}'")))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(cfg_err(line, "empty key"));
        }
        let sec = out.last_mut().unwrap();
        if key != "tag_box" && sec.1.iter().any(|e| e.key == key) {
            return Err(cfg_err(line, format!("duplicate key '{key}'")));
        }
        sec.1.push(Entry { key, value: v.trim().to_string(), line });
    }
    if let Some(e) = out[0].1.first() {
        return Err(cfg_err(e.line, format!("key '{}' outside of any section", e.key)));
    }
    out.remove(0);
    Ok(out)
}

fn apply_material(m: &mut ElementMaterial, e: &Entry) -> Result<()> {
    let v = || parse_number(&e.value).map_err(|err| cfg_err(e.line, err));
    match e.key.as_str() {
        "c" => {
            let c = v()?;
            m.c2 = c * c;
        }
        "c2" => m.c2 = v()?,
        "b" => m.b = v()?,
        "delta" => m.delta = v()?,
        "k" => m.k = v()?,
        "eps" => m.eps = v()?,
        "p" => m.p = v()?,
        "q" => m.q = v()?,
        "rho" => m.rho = v()?,
        "lambda" => m.lambda = v()?,
        "mu" => m.mu = v()?,
        "b_hat" => m.b_hat = v()?,
        "c_voigt" => m.c_voigt = Some(parse_list(&e.value).map_err(|err| cfg_err(e.line, err))?),
        "b_voigt" => m.b_voigt = Some(parse_list(&e.value).map_err(|err| cfg_err(e.line, err))?),
        other => return Err(cfg_err(e.line, format!("unknown key '{other}' in material section"))),
    }
    Ok(())
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

fn parse_tag_box(e: &Entry, dim: usize) -> Result<TagBox> {
    let (tag, coords) = e.value.split_once(':').ok_or_else(|| cfg_err(e.line, "tag_box expects 'TAG: lo1, hi1, ...'"))?;
    let tag: Tag = tag.parse().map_err(|err| cfg_err(e.line, err))?;
    let c = parse_list(coords).map_err(|err| cfg_err(e.line, err))?;
    if c.len() != 2 * dim {
        return Err(cfg_err(e.line, format!("tag_box needs {} numbers for dim {dim}", 2 * dim)));
    }
    Ok(TagBox { tag, lo: c.iter().step_by(2).copied().collect(), hi: c.iter().skip(1).step_by(2).copied().collect() })
}

impl ScenarioConfig {
    /// Parse and validate a config; relative file paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<ScenarioConfig> {
        let sections = tokenize(text)?;
        let mut get: HashMap<&str, &Vec<Entry>> = HashMap::new();
        let mut tag_sections = Vec::new();
        for (name, entries) in &sections {
            match name.as_str() {
                "scenario" | "model" | "mesh" | "material" | "initial" | "time" | "solver" | "admissibility" | "study" | "output" => {
                    get.insert(name.as_str(), entries);
                }
                n if n.starts_with("material.") => {
                    let tag: Tag = n["material.".len()..].parse()?;
                    tag_sections.push((tag, entries));
                }
                other => return Err(Error::Config(format!("unknown section [{other}]"))),
            }
        }
        let empty = Vec::new();
        let sec = |n: &str| -> &Vec<Entry> { get.get(n).copied().unwrap_or(&empty) };
        let check_keys = |n: &str, allowed: &[&str]| -> Result<()> {
            for e in sec(n) {
                if !allowed.contains(&e.key.as_str()) {
                    return Err(cfg_err(e.line, format!("unknown key '{}' in [{n}]", e.key)));
                }
            }
            Ok(())
        };
        let find = |n: &str, k: &str| -> Option<&Entry> { sec(n).iter().find(|e| e.key == k) };
        let num = |n: &str, k: &str| -> Result<Option<f64>> {
            find(n, k).map(|e| parse_number(&e.value).map_err(|err| cfg_err(e.line, err))).transpose()
        };
        let count = |n: &str, k: &str| -> Result<Option<usize>> {
            find(n, k).map(|e| parse_count(&e.value).map_err(|err| cfg_err(e.line, err))).transpose()
        };
        let flag = |n: &str, k: &str| -> Result<Option<bool>> {
            find(n, k).map(|e| parse_bool(&e.value).map_err(|err| cfg_err(e.line, err))).transpose()
        };

        check_keys("scenario", &["name", "description"])?;
        check_keys("model", &["kind"])?;
        check_keys("mesh", &["dim", "n", "length", "file", "default_tag", "tag_box"])?;
        check_keys(
            "initial",
            &["u", "ut", "u_amplitude", "ut_amplitude", "u_file", "ut_file", "width", "center", "project_gradient"],
        )?;
        check_keys("time", &["T", "dt"])?;
        check_keys("solver", &["mode", "newton_tol", "max_newton", "max_halvings", "max_outer", "outer_tol", "degeneracy_floor"])?;
        check_keys("admissibility", &["m_bar", "M_bar", "kappa", "a_bar", "samples", "seed"])?;
        check_keys("study", &["type", "levels", "window", "manufactured"])?;
        check_keys("output", &["dir", "snapshots", "checks"])?;

        let name = find("scenario", "name").map(|e| e.value.clone()).unwrap_or_else(|| "scenario".into());
        let kind: ModelKind = find("model", "kind").ok_or_else(|| Error::Config("[model] kind is required".into()))?.value.parse()?;

        let dim = count("mesh", "dim")?.unwrap_or(1);
        if !(1..=3).contains(&dim) {
            return Err(Error::Config(format!("mesh dim must be 1, 2 or 3, got {dim}")));
        }
        let source = match find("mesh", "file") {
            Some(e) => {
                if find("mesh", "n").is_some() {
                    return Err(cfg_err(e.line, "give either 'file' or 'n', not both"));
                }
                MeshSource::File(resolve(base, &e.value))
            }
            None => {
                let e = find("mesh", "n").ok_or_else(|| Error::Config("[mesh] needs 'n' or 'file'".into()))?;
                let n: Vec<usize> = e.value.split(',').map(parse_count).collect::<Result<_>>().map_err(|err| cfg_err(e.line, err))?;
                let n = if n.len() == 1 { vec![n[0]; dim] } else { n };
                let length = match find("mesh", "length") {
                    Some(l) => parse_list(&l.value).map_err(|err| cfg_err(l.line, err))?,
                    None => vec![1.0],
                };
                let length = if length.len() == 1 { vec![length[0]; dim] } else { length };
                if n.len() != dim || length.len() != dim || n.iter().any(|&x| x == 0) || length.iter().any(|&l| l <= 0.0) {
                    return Err(cfg_err(e.line, format!("need {dim} positive subdivisions and lengths")));
                }
                MeshSource::Structured { n, length }
            }
        };
        let default_tag = match find("mesh", "default_tag") {
            Some(e) => e.value.parse().map_err(|err| cfg_err(e.line, err))?,
            None => Tag::Default,
        };
        let boxes = sec("mesh").iter().filter(|e| e.key == "tag_box").map(|e| parse_tag_box(e, dim)).collect::<Result<_>>()?;
        let mesh = MeshConfig { dim, source, default_tag, boxes };

        let mut material = ElementMaterial::default();
        for e in sec("material") {
            apply_material(&mut material, e)?;
        }
        let mut per_tag = BTreeMap::new();
        for (tag, entries) in tag_sections {
            let mut m = material.clone();
            for e in entries.iter() {
                apply_material(&mut m, e)?;
            }
            per_tag.insert(tag, m);
        }

        let profile = |key: &str, amp_key: &str, file_key: &str, default: ProfileKind| -> Result<Profile> {
            let kind = match find("initial", key) {
                Some(e) => e.value.parse().map_err(|err| cfg_err(e.line, err))?,
                None => default,
            };
            let file = find("initial", file_key).map(|e| resolve(base, &e.value));
            if kind == ProfileKind::File && file.is_none() {
                return Err(Error::Config(format!("[initial] {key} = FILE needs '{file_key}'")));
            }
            Ok(Profile { kind, amplitude: num("initial", amp_key)?.unwrap_or(1.0), file })
        };
        let initial = InitialConfig {
            u: profile("u", "u_amplitude", "u_file", ProfileKind::Zero)?,
            ut: profile("ut", "ut_amplitude", "ut_file", ProfileKind::Zero)?,
            width: num("initial", "width")?,
            center: find("initial", "center").map(|e| parse_list(&e.value).map_err(|err| cfg_err(e.line, err))).transpose()?,
            project_gradient: flag("initial", "project_gradient")?.unwrap_or(false),
        };
        if let Some(w) = initial.width {
            if w <= 0.0 {
                return Err(Error::Config("[initial] width must be positive".into()));
            }
        }
        if initial.center.as_ref().is_some_and(|c| c.len() != dim) {
            return Err(Error::Config(format!("[initial] center needs {dim} coordinates")));
        }
        let vector = kind == ModelKind::ElasticCoupled;
        for p in [&initial.u, &initial.ut] {
            let ok = match p.kind {
                ProfileKind::Zero | ProfileKind::File => true,
                ProfileKind::GradientBump => vector,
                _ => !vector,
            };
            if !ok {
                return Err(Error::Config(format!("profile {} does not apply to {kind}", p.kind.name())));
            }
        }
        if initial.project_gradient && !vector {
            return Err(Error::Config("project_gradient applies to vector unknowns only".into()));
        }

        let t_final = num("time", "T")?.ok_or_else(|| Error::Config("[time] T is required".into()))?;
        let dt = num("time", "dt")?.ok_or_else(|| Error::Config("[time] dt is required".into()))?;
        if t_final <= 0.0 || dt <= 0.0 {
            return Err(Error::Config("T and dt must be positive".into()));
        }
        let steps = t_final / dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::Config(format!("T = {t_final} is not a multiple of dt = {dt}")));
        }

        let defaults = NewtonOptions::default();
        let mode = match find("solver", "mode") {
            Some(e) => e.value.parse().map_err(|err| cfg_err(e.line, err))?,
            None => SolveMode::Monolithic,
        };
        let solver = SolverConfig {
            mode,
            newton: NewtonOptions {
                tol: num("solver", "newton_tol")?.unwrap_or(defaults.tol),
                max_iter: count("solver", "max_newton")?.unwrap_or(defaults.max_iter),
                max_halvings: count("solver", "max_halvings")?.unwrap_or(defaults.max_halvings),
            },
            max_outer: count("solver", "max_outer")?.unwrap_or(20),
            outer_tol: num("solver", "outer_tol")?.unwrap_or(1e-9),
            floor: num("solver", "degeneracy_floor")?.unwrap_or(DEGENERACY_FLOOR),
        };
        if solver.newton.tol <= 0.0 || solver.newton.max_iter == 0 || solver.max_outer == 0 || solver.outer_tol <= 0.0 {
            return Err(Error::Config("solver tolerances and iteration limits must be positive".into()));
        }
        if !(0.0..1.0).contains(&solver.floor) {
            return Err(Error::Config("degeneracy_floor must lie in [0, 1)".into()));
        }

        let admissibility = if get.contains_key("admissibility") {
            let req = |k: &str| -> Result<f64> {
                num("admissibility", k)?.ok_or_else(|| Error::Config(format!("[admissibility] {k} is required")))
            };
            let mut b = AdmissibilityBounds::new(req("m_bar")?, req("M_bar")?, req("kappa")?);
            b.a_bar = num("admissibility", "a_bar")?;
            b.samples = count("admissibility", "samples")?.unwrap_or(b.samples);
            if let Some(e) = find("admissibility", "seed") {
                b.seed = e.value.trim().parse().map_err(|_| cfg_err(e.line, "seed must be an unsigned integer"))?;
            }
            if b.m_bar <= 0.0 || b.big_m_bar <= 0.0 || b.kappa < 0.0 || b.samples == 0 {
                return Err(Error::Config("admissibility bounds must be positive".into()));
            }
            Some(b)
        } else {
            None
        };

        let study_type = find("study", "type").map(|e| e.value.trim().to_ascii_uppercase()).unwrap_or_else(|| "NONE".into());
        let levels = count("study", "levels")?;
        let study = match study_type.as_str() {
            "NONE" => Study::None,
            "SPATIAL_REFINEMENT" | "DT_REFINEMENT" => {
                let levels = levels.unwrap_or(3);
                if levels < 2 {
                    return Err(Error::Config("a refinement study needs at least 2 levels".into()));
                }
                if study_type == "DT_REFINEMENT" {
                    Study::DtRefinement { levels }
                } else {
                    if matches!(mesh.source, MeshSource::File(_)) {
                        return Err(Error::Config("spatial refinement needs a structured mesh".into()));
                    }
                    let manufactured = flag("study", "manufactured")?.unwrap_or(false);
                    if manufactured && (kind != ModelKind::PressureViscosity || dim != 1) {
                        return Err(Error::Config("the manufactured study is defined for PRESSURE_VISCOSITY in 1D".into()));
                    }
                    Study::SpatialRefinement { levels, manufactured }
                }
            }
            "DECAY" => {
                let e = find("study", "window").ok_or_else(|| Error::Config("DECAY study needs 'window = a, b'".into()))?;
                let w = parse_list(&e.value).map_err(|err| cfg_err(e.line, err))?;
                if w.len() != 2 || w[0] >= w[1] {
                    return Err(cfg_err(e.line, "window must be 'a, b' with a < b"));
                }
                Study::Decay { window: (w[0], w[1]) }
            }
            other => return Err(Error::Config(format!("unknown study type '{other}'"))),
        };
        if !matches!(study, Study::SpatialRefinement { manufactured: true, .. }) && find("study", "manufactured").is_some() {
            return Err(Error::Config("'manufactured' applies to SPATIAL_REFINEMENT only".into()));
        }

        let checks = match find("output", "checks") {
            None => Checks::Auto,
            Some(e) if e.value.trim().eq_ignore_ascii_case("AUTO") => Checks::Auto,
            Some(e) if e.value.trim().eq_ignore_ascii_case("NONE") => Checks::List(Vec::new()),
            Some(e) => {
                let list: Vec<Inequality> =
                    e.value.split(',').map(|s| s.parse()).collect::<Result<_>>().map_err(|err| cfg_err(e.line, err))?;
                if let Some(bad) = list.iter().find(|w| !w.applies_to(kind)) {
                    return Err(cfg_err(e.line, format!("check {bad} does not apply to {kind}")));
                }
                Checks::List(list)
            }
        };
        let output = OutputConfig {
            dir: find("output", "dir").map(|e| PathBuf::from(&e.value)),
            snapshots: find("output", "snapshots").map(|e| parse_list(&e.value).map_err(|err| cfg_err(e.line, err))).transpose()?,
            checks,
        };

        let cfg = ScenarioConfig { name, kind, mesh, material, per_tag, initial, t_final, dt, solver, admissibility, study, output };
        cfg.build_model(0)?;
        Ok(cfg)
    }

    /// Structured mesh refined `level` times (subdivisions doubled each time).
    pub fn build_mesh(&self, level: usize) -> Result<Mesh> {
        let mesh = match &self.mesh.source {
            MeshSource::File(p) => {
                if level > 0 {
                    return Err(Error::Config("cannot refine a mesh read from file".into()));
                }
                let m = Mesh::read_text(&fs::read_to_string(p)?)?;
                if m.dim() != self.mesh.dim {
                    return Err(Error::Config(format!("mesh file has dim {}, config says {}", m.dim(), self.mesh.dim)));
                }
                m
            }
            MeshSource::Structured { n, length } => {
                let f = 1usize << level;
                match self.mesh.dim {
                    1 => interval_mesh(n[0] * f, length[0])?,
                    2 => rect_mesh(n[0] * f, n[1] * f, length[0], length[1])?,
                    _ => box_mesh(n[0] * f, n[1] * f, n[2] * f, length[0], length[1], length[2])?,
                }
            }
        };
        if self.mesh.boxes.is_empty() && self.mesh.default_tag == Tag::Default {
            return Ok(mesh);
        }
        Ok(tag_elements(&mesh, |x| {
            let mut tag = self.mesh.default_tag;
            for b in &self.mesh.boxes {
                if x.iter().zip(b.lo.iter().zip(&b.hi)).all(|(x, (lo, hi))| *lo <= *x && *x <= *hi) {
                    tag = b.tag;
                }
            }
            tag
        }))
    }

    pub fn manufactured(&self) -> Option<SineCos> {
        matches!(self.study, Study::SpatialRefinement { manufactured: true, .. }).then(|| SineCos::from_material(&self.material))
    }

    pub fn build_model(&self, level: usize) -> Result<Model> {
        let mesh = Arc::new(self.build_mesh(level)?);
        let mat = MaterialSpec::by_tag(&mesh, self.material.clone(), &self.per_tag);
        let mut model = Model::new(self.kind, mesh, mat)?.with_floor(self.solver.floor);
        if let Some(exact) = self.manufactured() {
            model = model.with_forcing(exact.forcing());
        }
        Ok(model)
    }

    fn eval_profile(&self, model: &Model, p: &Profile) -> Result<Vec<f64>> {
        let mesh = model.mesh();
        let d = mesh.dim();
        let lens: Vec<f64> = (0..d)
            .map(|c| (0..mesh.n_nodes()).map(|i| mesh.node(i)[c]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let a = p.amplitude;
        let center = self.initial.center.clone().unwrap_or_else(|| lens.iter().map(|l| 0.5 * l).collect());
        let width = self.initial.width.unwrap_or(0.1 * lens.iter().copied().fold(f64::INFINITY, f64::min));
        let out = match p.kind {
            ProfileKind::Zero => vec![0.0; model.n_dofs()],
            ProfileKind::Sine => interpolate_dirichlet(mesh, |x| a * (0..d).map(|c| (PI * x[c] / lens[c]).sin()).product::<f64>()),
            ProfileKind::Tent => {
                interpolate_dirichlet(mesh, |x| a * (0..d).map(|c| 1.0 - (2.0 * x[c] / lens[c] - 1.0).abs()).product::<f64>())
            }
            ProfileKind::GaussianBump => interpolate_dirichlet(mesh, |x| {
                let r2: f64 = (0..d).map(|c| (x[c] - center[c]).powi(2)).sum();
                a * (-r2 / (width * width)).exp()
            }),
            ProfileKind::Bump => {
                interpolate_dirichlet(mesh, |x| a * (0..d).map(|c| (PI * x[c] / lens[c]).sin().powi(2)).product::<f64>())
            }
            ProfileKind::GradientBump => {
                let mut v = Vec::with_capacity(model.n_dofs());
                for comp in 0..d {
                    v.extend(interpolate_dirichlet(mesh, |x| {
                        a * (0..d)
                            .map(|c| {
                                let s = PI * x[c] / lens[c];
                                if c == comp {
                                    PI / lens[c] * (2.0 * s).sin()
                                } else {
                                    s.sin().powi(2)
                                }
                            })
                            .product::<f64>()
                    }));
                }
                v
            }
            ProfileKind::File => {
                let path = p.file.as_ref().expect("checked at parse time");
                let vals = fs::read_to_string(path)?
                    .split_whitespace()
                    .map(parse_number)
                    .collect::<Result<Vec<f64>>>()?;
                if vals.len() != model.n_dofs() {
                    return Err(Error::Config(format!(
                        "{} holds {} values, the model has {} unknowns",
                        path.display(),
                        vals.len(),
                        model.n_dofs()
                    )));
                }
                vals.iter().map(|&x| x * a).collect()
            }
        };
        if self.initial.project_gradient {
            return gradient_projection(mesh, &poisson_solve(mesh, &out)?);
        }
        Ok(out)
    }

    pub fn initial_state(&self, model: &Model) -> Result<State> {
        if let Some(exact) = self.manufactured() {
            return exact.initial_state(model.mesh());
        }
        Ok(State { t: 0.0, u: self.eval_profile(model, &self.initial.u)?, ut: self.eval_profile(model, &self.initial.ut)? })
    }

    pub fn solve(&self, model: &Model, dt: f64) -> Result<Trajectory> {
        let s0 = self.initial_state(model)?;
        match self.solver.mode {
            SolveMode::Monolithic => integrate_with(model, &s0, self.t_final, dt, &self.solver.newton),
            SolveMode::FixedPoint => {
                fixed_point_outer_with(model, &s0, self.t_final, dt, self.solver.max_outer, self.solver.outer_tol, &self.solver.newton)
            }
        }
    }

    fn checks(&self, forced: bool) -> Vec<Inequality> {
        if forced {
            return Vec::new();
        }
        match &self.output.checks {
            Checks::Auto => Inequality::ALL.iter().copied().filter(|w| w.applies_to(self.kind)).collect(),
            Checks::List(l) => l.clone(),
        }
    }
}

/// Key/value pairs written to summary.csv, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "key,value")?;
        for (k, v) in &self.entries {
            writeln!(w, "{k},{v}")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub level: usize,
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    pub error: Option<f64>,
    pub rate: Option<f64>,
    pub interface_jump: Option<f64>,
    pub equipartition: Option<f64>,
}

pub const STUDY_HEADER: &str = "level,n,h,dt,error,rate,interface_jump,equipartition";
pub const SOLVE_REPORT_HEADER: &str = "step,t,newton_iters,final_residual,degeneracy_margin";
pub const CONTRACTION_HEADER: &str = "outer_iteration,distance,ratio";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_else(|| "nan".into())
}

struct Level {
    model: Model,
    dt: f64,
    traj: Trajectory,
}

/// Vertex-lumped L2 norm over a coarse mesh of (coarse − fine), matching nodes by coordinates.
fn nested_difference(coarse: &Model, cu: &[f64], fine: &Model, fu: &[f64]) -> Result<f64> {
    let key = |x: &[f64]| -> Vec<i64> { x.iter().map(|v| (v * 1e9).round() as i64).collect() };
    let fm = fine.mesh();
    let index: HashMap<Vec<i64>, usize> = (0..fm.n_nodes()).map(|i| (key(fm.node(i)), i)).collect();
    let cm = coarse.mesh();
    let lumped: Vec<f64> = {
        let m = mass_matrix(cm, Weight::Const(1.0));
        m.matvec(&vec![1.0; cm.n_nodes()])
    };
    let (nc, nf) = (cm.n_nodes(), fm.n_nodes());
    let mut s = 0.0;
    for i in 0..nc {
        let j = *index.get(&key(cm.node(i))).ok_or_else(|| Error::Mesh("refinement levels are not nested".into()))?;
        for c in 0..coarse.components() {
            s += lumped[i] * (cu[c * nc + i] - fu[c * nf + j]).powi(2);
        }
    }
    Ok(s.sqrt())
}

fn study_rows(cfg: &ScenarioConfig, levels: &[Level]) -> Result<Vec<StudyRow>> {
    let n0 = match &cfg.mesh.source {
        MeshSource::Structured { n, .. } => n[0],
        MeshSource::File(_) => 0,
    };
    let spatial = matches!(cfg.study, Study::SpatialRefinement { .. });
    let exact = cfg.manufactured();
    let last = levels.last().unwrap();
    let mut rows = Vec::new();
    for (l, lev) in levels.iter().enumerate() {
        let mesh = lev.model.mesh();
        let error = if let Some(ex) = &exact {
            Some(lev.traj.states.iter().map(|s| l2_error(mesh, &s.u, |x| ex.u(x[0], s.t))).fold(0.0, f64::max))
        } else if l + 1 < levels.len() {
            let (a, b) = (&lev.traj.final_state().u, &last.traj.final_state().u);
            Some(if spatial {
                nested_difference(&lev.model, a, &last.model, b)?
            } else {
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                lp_norm(mesh, &d, Exponent::Finite(2.0), false)?
            })
        } else {
            None
        };
        let nodes = mesh.tag_interface_nodes();
        let jump = if nodes.is_empty() { None } else { Some(interface_jump(&lev.traj, &lev.model, &nodes)?.normalized) };
        let equi = if cfg.kind == ModelKind::PressurePlaplace && exact.is_none() {
            Some(equipartition_residual(&lev.traj, &lev.model)?.corrected)
        } else {
            None
        };
        rows.push(StudyRow {
            level: l,
            n: if spatial { n0 << l } else { n0 },
            h: mesh.max_diameter(),
            dt: lev.dt,
            error,
            rate: None,
            interface_jump: jump,
            equipartition: equi,
        });
    }
    for l in 1..rows.len() {
        if let (Some(a), Some(b)) = (rows[l - 1].error, rows[l].error) {
            if a > 0.0 && b > 0.0 {
                rows[l].rate = Some((a / b).log2());
            }
        }
    }
    Ok(rows)
}

/// Outcome of a successful run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: Summary,
    pub study: Vec<StudyRow>,
}

/// Validate, create `dir`, solve and write all reports. Config problems are reported before anything is written.
pub fn run(cfg: &ScenarioConfig, dir: &Path, seed: Option<u64>) -> Result<RunOutput> {
    let n_levels = match cfg.study {
        Study::SpatialRefinement { levels, .. } | Study::DtRefinement { levels } => levels,
        _ => 1,
    };
    let specs: Vec<(Model, f64)> = (0..n_levels)
        .map(|l| {
            let dt = cfg.dt / (1usize << l) as f64;
            let model = if matches!(cfg.study, Study::SpatialRefinement { .. }) { cfg.build_model(l)? } else { cfg.build_model(0)? };
            Ok((model, dt))
        })
        .collect::<Result<_>>()?;
    for (m, _) in &specs {
        cfg.initial_state(m)?;
    }
    let mut bounds = cfg.admissibility;
    if let (Some(b), Some(s)) = (bounds.as_mut(), seed) {
        b.seed = s;
    }

    fs::create_dir_all(dir)?;
    let base = &specs[0].0;
    base.mesh().write_text(BufWriter::new(fs::File::create(dir.join("mesh.txt"))?))?;

    let mut summary = Summary::default();
    summary.push("scenario", &cfg.name);
    summary.push("kind", cfg.kind);
    summary.push("mode", cfg.solver.mode);
    summary.push("study", cfg.study.name());
    summary.push("n_nodes", base.mesh().n_nodes());
    summary.push("n_elements", base.mesh().n_elements());
    summary.push("T", cfg.t_final);
    summary.push("dt", cfg.dt);

    let results: Vec<Result<Trajectory>> = specs.par_iter().map(|(m, dt)| cfg.solve(m, *dt)).collect();
    let mut levels = Vec::with_capacity(n_levels);
    for ((model, dt), r) in specs.into_iter().zip(results) {
        match r {
            Ok(traj) => levels.push(Level { model, dt, traj }),
            Err(e) => {
                summary.push("status", "FAILED");
                summary.push("exit_code", e.exit_code());
                if let Error::Degeneracy { time, margin, floor } = &e {
                    summary.push("degeneracy_time", time);
                    summary.push("degeneracy_margin", margin);
                    summary.push("degeneracy_floor", floor);
                }
                summary.push("error", e.to_string().replace(',', ";"));
                summary.write(&dir.join("summary.csv"))?;
                return Err(e);
            }
        }
    }

    let main = &levels[0];
    let (model, traj) = (&main.model, &main.traj);
    let mut report = EnergyReport::new(traj, model)?;
    for which in cfg.checks(model.forcing().is_some()) {
        let rec = check_energy_inequality(traj, model, which)?;
        report.add_margins(&rec);
        summary.push(&format!("check_{which}_pass"), rec.pass);
        summary.push(&format!("check_{which}_worst_margin"), format!("{:e}", rec.worst_margin));
        if let Some(c) = rec.constant {
            summary.push(&format!("check_{which}_constant"), format!("{c:e}"));
        }
    }
    if let Study::Decay { window } = cfg.study {
        let fit = report.fit_decay(window)?;
        summary.push("omega", format!("{:e}", fit.omega));
        summary.push("r_squared", format!("{:e}", fit.r_squared));
        summary.push("fit_points", fit.points);
    }
    report.write_csv(BufWriter::new(fs::File::create(dir.join("energy.csv"))?))?;

    let rep = &traj.report;
    summary.push("status", "OK");
    summary.push("steps", traj.steps());
    summary.push("min_degeneracy_margin", format!("{:e}", rep.min_margin()));
    summary.push("max_newton_iters", rep.newton_iters.iter().max().copied().unwrap_or(0));
    let e0 = &report.e0;
    summary.push("E0_initial", format!("{:e}", e0[0]));
    summary.push("E0_final", format!("{:e}", e0[e0.len() - 1]));
    let drift = e0.iter().map(|e| (e - e0[0]).abs()).fold(0.0, f64::max) / e0[0].max(f64::MIN_POSITIVE);
    summary.push("E0_relative_drift", format!("{drift:e}"));
    if let Some(w) = report.ew1.last().copied().flatten() {
        summary.push("EW1_final", format!("{w:e}"));
    }
    summary.push("max_energy_increase", format!("{:e}", report.max_increase()));
    if let Some(m) = rep.outer_iterations {
        summary.push("outer_iterations", m);
        summary.push("fixed_point_converged", rep.fixed_point_converged.unwrap_or(false));
        summary.push("max_contraction_ratio", format!("{:e}", rep.fixed_point_ratios.iter().copied().fold(0.0, f64::max)));
    }
    if let Some(b) = &bounds {
        let rec = check_admissibility(traj, model, b)?;
        summary.push("admissible", rec.member);
        for o in &rec.observed {
            summary.push(&format!("admissibility_{}", o.name), format!("{:e}", o.value));
        }
        summary.push("embedding_constant", format!("{:e}", rec.embedding_constant));
        summary.push("smallness_lhs", format!("{:e}", rec.smallness_lhs));
    }
    if cfg.kind == ModelKind::PressurePlaplace && model.forcing().is_none() {
        let eq = equipartition_residual(traj, model)?;
        summary.push("equipartition_residual", format!("{:e}", eq.corrected));
        summary.push("equipartition_residual_uncorrected", format!("{:e}", eq.uncorrected));
    }
    let nodes = model.mesh().tag_interface_nodes();
    if !nodes.is_empty() {
        let j = interface_jump(traj, model, &nodes)?;
        summary.push("interface_jump", format!("{:e}", j.normalized));
        summary.push("interface_weak_residual", format!("{:e}", j.weak_residual));
    }

    write_solve_report(&dir.join("solve_report.csv"), traj)?;
    write_contraction(&dir.join("contraction.csv"), traj)?;
    write_snapshots(&dir.join("snapshots.csv"), traj, model, cfg.output.snapshots.as_deref())?;

    let mut plot = Plot::new(&format!("{}: energy", cfg.name), "t", "energy (log scale)", true)
        .with_series("E0", report.times.clone(), report.e0.clone())
        .with_series("E1", report.times.clone(), report.e1.clone());
    if report.ew1.iter().all(Option::is_some) {
        plot = plot.with_series("EW1", report.times.clone(), report.ew1.iter().map(|x| x.unwrap()).collect());
    }
    fs::write(dir.join("energy.svg"), plot.render())?;
    let its: Vec<f64> = (1..=rep.fixed_point_ratios.len()).map(|i| i as f64).collect();
    let contraction = Plot::new(&format!("{}: contraction", cfg.name), "outer iteration", "ratio (log scale)", true)
        .with_series("d_m / d_(m-1)", its, rep.fixed_point_ratios.clone());
    fs::write(dir.join("contraction.svg"), contraction.render())?;

    let study = if n_levels > 1 { study_rows(cfg, &levels)? } else { Vec::new() };
    if n_levels > 1 {
        let mut w = BufWriter::new(fs::File::create(dir.join("study.csv"))?);
        writeln!(w, "{STUDY_HEADER}")?;
        for r in &study {
            writeln!(
                w,
                "{},{},{:e},{:e},{},{},{},{}",
                r.level,
                r.n,
                r.h,
                r.dt,
                opt(r.error),
                opt(r.rate),
                opt(r.interface_jump),
                opt(r.equipartition)
            )?;
        }
        w.flush()?;
        let rates: Vec<f64> = study.iter().filter_map(|r| r.rate).collect();
        if let Some(min) = rates.iter().copied().reduce(f64::min) {
            summary.push("min_rate", format!("{min:e}"));
            summary.push("max_rate", format!("{:e}", rates.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
        }
    }
    summary.write(&dir.join("summary.csv"))?;
    Ok(RunOutput { dir: dir.to_path_buf(), summary, study })
}

fn write_solve_report(path: &Path, traj: &Trajectory) -> Result<()> {
    let rep = &traj.report;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{SOLVE_REPORT_HEADER}")?;
    for (n, s) in traj.states.iter().enumerate() {
        let (iters, res) = if n == 0 {
            (0, 0.0)
        } else {
            (rep.newton_iters[n - 1], rep.newton_residuals[n - 1].last().copied().unwrap_or(0.0))
        };
        writeln!(w, "{n},{:e},{iters},{res:e},{:e}", s.t, rep.degeneracy_margin[n])?;
    }
    w.flush()?;
    Ok(())
}

fn write_contraction(path: &Path, traj: &Trajectory) -> Result<()> {
    let rep = &traj.report;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{CONTRACTION_HEADER}")?;
    for (m, d) in rep.fixed_point_distances.iter().enumerate() {
        let ratio = if m == 0 { None } else { rep.fixed_point_ratios.get(m - 1).copied() };
        writeln!(w, "{m},{d:e},{}", opt(ratio))?;
    }
    w.flush()?;
    Ok(())
}

/// Header of snapshots.csv for a mesh dimension and component count.
pub fn snapshot_header(dim: usize, components: usize) -> String {
    let mut cols = vec!["t".to_string(), "node".to_string()];
    cols.extend(["x", "y", "z"][..dim].iter().map(|s| s.to_string()));
    if components == 1 {
        cols.push("u".into());
        cols.push("ut".into());
    } else {
        cols.extend((1..=components).map(|c| format!("u{c}")));
        cols.extend((1..=components).map(|c| format!("ut{c}")));
    }
    cols.join(",")
}

fn write_snapshots(path: &Path, traj: &Trajectory, model: &Model, times: Option<&[f64]>) -> Result<()> {
    let last = traj.states.len() - 1;
    let mut picks: Vec<usize> = match times {
        Some(ts) => ts.iter().map(|t| ((t / traj.dt()).round().max(0.0) as usize).min(last)).collect(),
        None => vec![0, last],
    };
    picks.sort_unstable();
    picks.dedup();
    let mesh = model.mesh();
    let (n, nc) = (mesh.n_nodes(), model.components());
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", snapshot_header(mesh.dim(), nc))?;
    for &l in &picks {
        let s = &traj.states[l];
        for i in 0..n {
            write!(w, "{:e},{i}", s.t)?;
            for x in mesh.node(i) {
                write!(w, ",{x:e}")?;
            }
            for c in 0..nc {
                write!(w, ",{:e}", s.u[c * n + i])?;
            }
            for c in 0..nc {
                write!(w, ",{:e}", s.ut[c * n + i])?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}
