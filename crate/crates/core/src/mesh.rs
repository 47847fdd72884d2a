//! Structured simplicial meshes on intervals, rectangles and boxes.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Subdomain label attached to every element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Default,
    Fluid,
    Solid,
    Nonlinear,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Default, Tag::Fluid, Tag::Solid, Tag::Nonlinear];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Default => "DEFAULT",
            Tag::Fluid => "FLUID",
            Tag::Solid => "SOLID",
            Tag::Nonlinear => "NONLINEAR",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "DEFAULT" => Ok(Tag::Default),
            "FLUID" => Ok(Tag::Fluid),
            "SOLID" => Ok(Tag::Solid),
            "NONLINEAR" => Ok(Tag::Nonlinear),
            other => Err(Error::Config(format!("unknown tag '{other}'"))),
        }
    }
}

/// Simplicial P1 mesh. Geometry (measures, barycentric gradients) is cached at build time.
#[derive(Clone, Debug)]
pub struct Mesh {
    dim: usize,
    coords: Vec<f64>,
    conn: Vec<usize>,
    boundary: Vec<bool>,
    tags: Vec<Tag>,
    measures: Vec<f64>,
    grads: Vec<[[f64; 3]; 4]>,
}

impl Mesh {
    /// Build from raw arrays. Elements with negative orientation are flipped.
    pub fn from_parts(dim: usize, coords: Vec<f64>, mut conn: Vec<usize>) -> Result<Mesh> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Mesh(format!("dimension {dim} not in 1..=3")));
        }
        if coords.len() % dim != 0 || conn.len() % (dim + 1) != 0 {
            return Err(Error::Mesh("array lengths inconsistent with dimension".into()));
        }
        let n_nodes = coords.len() / dim;
        let nv = dim + 1;
        let n_el = conn.len() / nv;
        let mut measures = Vec::with_capacity(n_el);
        let mut grads = Vec::with_capacity(n_el);
        for e in 0..n_el {
            let verts = &mut conn[e * nv..(e + 1) * nv];
            for (a, &i) in verts.iter().enumerate() {
                if i >= n_nodes {
                    return Err(Error::Mesh(format!("element {e}: node {i} out of range")));
                }
                if verts[..a].contains(&i) {
                    return Err(Error::Mesh(format!("element {e}: repeated vertex {i}")));
                }
            }
            let mut jac = edge_matrix(dim, &coords, verts);
            let mut det = jac.determinant();
            if det < 0.0 {
                verts.swap(0, 1);
                jac = edge_matrix(dim, &coords, verts);
                det = -det;
            }
            if !(det > 0.0) {
                return Err(Error::Mesh(format!("element {e} is degenerate")));
            }
            let inv = jac
                .try_inverse()
                .ok_or_else(|| Error::Mesh(format!("element {e} is degenerate")))?;
            let mut g = [[0.0; 3]; 4];
            // rows of J^{-1} are the gradients of λ_1..λ_d
            for a in 1..=dim {
                for c in 0..dim {
                    g[a][c] = inv[(a - 1, c)];
                    g[0][c] -= inv[(a - 1, c)];
                }
            }
            measures.push(det / factorial(dim));
            grads.push(g);
        }
        let boundary = boundary_flags(dim, n_nodes, &conn);
        Ok(Mesh {
            dim,
            coords,
            conn,
            boundary,
            tags: vec![Tag::Default; n_el],
            measures,
            grads,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_elements(&self) -> usize {
        self.measures.len()
    }

    /// Vertices per element (dim + 1).
    pub fn nv(&self) -> usize {
        self.dim + 1
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let nv = self.nv();
        &self.conn[e * nv..(e + 1) * nv]
    }

    pub fn measure(&self, e: usize) -> f64 {
        self.measures[e]
    }

    /// Gradient of the barycentric coordinate of local vertex `a` on element `e`.
    pub fn grad(&self, e: usize, a: usize) -> &[f64] {
        &self.grads[e][a][..self.dim]
    }

    pub fn tag(&self, e: usize) -> Tag {
        self.tags[e]
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary[i]
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.boundary[i]).collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| !self.boundary[i]).collect()
    }

    pub fn total_measure(&self) -> f64 {
        self.measures.iter().sum()
    }

    pub fn centroid(&self, e: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        let nv = self.nv() as f64;
        for &i in self.element(e) {
            for (k, x) in self.node(i).iter().enumerate() {
                c[k] += x / nv;
            }
        }
        c
    }

    /// Longest edge of element `e`.
    pub fn diameter(&self, e: usize) -> f64 {
        let v = self.element(e);
        let mut h: f64 = 0.0;
        for a in 0..v.len() {
            for b in a + 1..v.len() {
                let d2: f64 = self
                    .node(v[a])
                    .iter()
                    .zip(self.node(v[b]))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                h = h.max(d2.sqrt());
            }
        }
        h
    }

    pub fn max_diameter(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.diameter(e)).fold(0.0, f64::max)
    }

    /// Nodes shared by an element tagged `a` and an element tagged `b`.
    pub fn interface_nodes(&self, a: Tag, b: Tag) -> Vec<usize> {
        let n = self.n_nodes();
        let mut seen_a = vec![false; n];
        let mut seen_b = vec![false; n];
        for e in 0..self.n_elements() {
            let t = self.tags[e];
            for &i in self.element(e) {
                if t == a {
                    seen_a[i] = true;
                }
                if t == b {
                    seen_b[i] = true;
                }
            }
        }
        (0..n).filter(|&i| seen_a[i] && seen_b[i] && !self.boundary[i]).collect()
    }

    /// Nodes touching elements of more than one tag.
    pub fn tag_interface_nodes(&self) -> Vec<usize> {
        let n = self.n_nodes();
        let mut first: Vec<Option<Tag>> = vec![None; n];
        let mut mixed = vec![false; n];
        for e in 0..self.n_elements() {
            let t = self.tags[e];
            for &i in self.element(e) {
                match first[i] {
                    None => first[i] = Some(t),
                    Some(s) if s != t => mixed[i] = true,
                    _ => {}
                }
            }
        }
        (0..n).filter(|&i| mixed[i] && !self.boundary[i]).collect()
    }

    /// Write the plain-text export: header, one node per line, one element per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {} {}", self.dim, self.n_nodes(), self.n_elements())?;
        for i in 0..self.n_nodes() {
            let xs: Vec<String> = self.node(i).iter().map(|x| format!("{x:.17e}")).collect();
            writeln!(w, "{}", xs.join(" "))?;
        }
        for e in 0..self.n_elements() {
            let vs: Vec<String> = self.element(e).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{} {}", vs.join(" "), self.tags[e])?;
        }
        Ok(())
    }

    pub fn read_text(text: &str) -> Result<Mesh> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |m: &str| Error::Mesh(format!("mesh file: {m}"));
        let head: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad header")))
            .collect::<Result<_>>()?;
        if head.len() != 3 {
            return Err(bad("header needs dim, nodes, elements"));
        }
        let (dim, nn, ne) = (head[0], head[1], head[2]);
        let mut coords = Vec::with_capacity(nn * dim);
        for _ in 0..nn {
            let line = lines.next().ok_or_else(|| bad("missing node line"))?;
            for s in line.split_whitespace() {
                coords.push(s.parse::<f64>().map_err(|_| bad("bad coordinate"))?);
            }
        }
        let mut conn = Vec::with_capacity(ne * (dim + 1));
        let mut tags = Vec::with_capacity(ne);
        for _ in 0..ne {
            let line = lines.next().ok_or_else(|| bad("missing element line"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != dim + 2 {
                return Err(bad("element line length"));
            }
            for s in &toks[..=dim] {
                conn.push(s.parse::<usize>().map_err(|_| bad("bad index"))?);
            }
            tags.push(toks[dim + 1].parse::<Tag>()?);
        }
        let mut m = Mesh::from_parts(dim, coords, conn)?;
        m.tags = tags;
        Ok(m)
    }
}

fn factorial(d: usize) -> f64 {
    (1..=d).product::<usize>() as f64
}

fn edge_matrix(dim: usize, coords: &[f64], verts: &[usize]) -> DMatrix<f64> {
    let x0 = &coords[verts[0] * dim..verts[0] * dim + dim];
    DMatrix::from_fn(dim, dim, |r, c| coords[verts[c + 1] * dim + r] - x0[r])
}

/// Nodes on facets that belong to exactly one element.
fn boundary_flags(dim: usize, n_nodes: usize, conn: &[usize]) -> Vec<bool> {
    let nv = dim + 1;
    let mut count: HashMap<[usize; 3], u32> = HashMap::new();
    for el in conn.chunks(nv) {
        for skip in 0..nv {
            let mut key = [usize::MAX; 3];
            let mut k = 0;
            for (a, &v) in el.iter().enumerate() {
                if a != skip {
                    key[k] = v;
                    k += 1;
                }
            }
            key[..dim].sort_unstable();
            *count.entry(key).or_insert(0) += 1;
        }
    }
    let mut flags = vec![false; n_nodes];
    for (key, c) in count {
        if c == 1 {
            for &v in &key[..dim] {
                flags[v] = true;
            }
        }
    }
    flags
}

fn check_positive(name: &str, n: usize, len: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Mesh(format!("{name}: zero subdivisions")));
    }
    if !(len > 0.0 && len.is_finite()) {
        return Err(Error::Mesh(format!("{name}: length must be positive")));
    }
    Ok(())
}

/// n equal elements on (0, length).
pub fn interval_mesh(n: usize, length: f64) -> Result<Mesh> {
    check_positive("interval_mesh", n, length)?;
    let coords: Vec<f64> = (0..=n).map(|i| length * i as f64 / n as f64).collect();
    let conn: Vec<usize> = (0..n).flat_map(|i| [i, i + 1]).collect();
    Mesh::from_parts(1, coords, conn)
}

/// Structured triangulation of (0,lx)×(0,ly); every cell is cut along the same diagonal.
pub fn rect_mesh(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Mesh> {
    check_positive("rect_mesh", nx, lx)?;
    check_positive("rect_mesh", ny, ly)?;
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut coords = Vec::with_capacity((nx + 1) * (ny + 1) * 2);
    for j in 0..=ny {
        for i in 0..=nx {
            coords.push(lx * i as f64 / nx as f64);
            coords.push(ly * j as f64 / ny as f64);
        }
    }
    let mut conn = Vec::with_capacity(nx * ny * 6);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            conn.extend_from_slice(&[a, b, c, a, c, d]);
        }
    }
    Mesh::from_parts(2, coords, conn)
}

/// Kuhn subdivision of (0,lx)×(0,ly)×(0,lz): six tetrahedra per cell.
pub fn box_mesh(nx: usize, ny: usize, nz: usize, lx: f64, ly: f64, lz: f64) -> Result<Mesh> {
    check_positive("box_mesh", nx, lx)?;
    check_positive("box_mesh", ny, ly)?;
    check_positive("box_mesh", nz, lz)?;
    let id = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let mut coords = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1) * 3);
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                coords.push(lx * i as f64 / nx as f64);
                coords.push(ly * j as f64 / ny as f64);
                coords.push(lz * k as f64 / nz as f64);
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut conn = Vec::with_capacity(nx * ny * nz * 24);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for p in PERMS {
                    let mut c = [i, j, k];
                    conn.push(id(c[0], c[1], c[2]));
                    for axis in p {
                        c[axis] += 1;
                        conn.push(id(c[0], c[1], c[2]));
                    }
                }
            }
        }
    }
    Mesh::from_parts(3, coords, conn)
}

/// Relabel elements by evaluating `predicate` at each centroid.
pub fn tag_elements<F>(mesh: &Mesh, predicate: F) -> Mesh
where
    F: Fn(&[f64]) -> Tag,
{
    let mut out = mesh.clone();
    for e in 0..mesh.n_elements() {
        let c = mesh.centroid(e);
        out.tags[e] = predicate(&c[..mesh.dim]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_single_element() {
        let m = interval_mesh(1, 1.0).unwrap();
        assert_eq!(m.n_nodes(), 2);
        assert_eq!(m.n_elements(), 1);
        assert_eq!(m.node(0), &[0.0]);
        assert_eq!(m.node(1), &[1.0]);
        assert_eq!(m.boundary_nodes(), vec![0, 1]);
    }

    #[test]
    fn interval_uniform() {
        let m = interval_mesh(4, 1.0).unwrap();
        assert_eq!(m.n_nodes(), 5);
        for e in 0..4 {
            assert!((m.measure(e) - 0.25).abs() < 1e-15);
        }
        assert_eq!(m.boundary_nodes(), vec![0, 4]);
    }

    #[test]
    fn interval_total_measure() {
        let m = interval_mesh(100, 2.0).unwrap();
        assert!((m.total_measure() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_subdivisions_rejected() {
        assert!(interval_mesh(0, 1.0).is_err());
        assert!(rect_mesh(0, 1, 1.0, 1.0).is_err());
        assert!(box_mesh(1, 1, 0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn rect_counts() {
        let m = rect_mesh(1, 1, 1.0, 1.0).unwrap();
        assert_eq!((m.n_nodes(), m.n_elements()), (4, 2));
        assert_eq!(m.boundary_nodes().len(), 4);
        let m = rect_mesh(2, 2, 1.0, 1.0).unwrap();
        assert_eq!((m.n_nodes(), m.n_elements()), (9, 8));
        assert_eq!(m.boundary_nodes().len(), 8);
        assert_eq!(m.interior_nodes(), vec![4]);
    }

    #[test]
    fn rect_measure() {
        let m = rect_mesh(3, 5, 2.0, 0.7).unwrap();
        assert!((m.total_measure() - 1.4).abs() < 1e-12 * 1.4);
    }

    #[test]
    fn box_single_cell() {
        let m = box_mesh(1, 1, 1, 1.0, 1.0, 1.0).unwrap();
        assert_eq!((m.n_nodes(), m.n_elements()), (8, 6));
        assert_eq!(m.boundary_nodes().len(), 8);
        for e in 0..6 {
            assert!((m.measure(e) - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn box_interior_faces_shared_twice() {
        let m = box_mesh(2, 3, 2, 1.0, 1.5, 0.5).unwrap();
        assert!((m.total_measure() - 0.75).abs() < 1e-12);
        let mut count: HashMap<[usize; 3], u32> = HashMap::new();
        for e in 0..m.n_elements() {
            let v = m.element(e);
            for skip in 0..4 {
                let mut f: Vec<usize> = (0..4).filter(|&a| a != skip).map(|a| v[a]).collect();
                f.sort_unstable();
                *count.entry([f[0], f[1], f[2]]).or_insert(0) += 1;
            }
        }
        for (f, c) in count {
            let on_boundary = (0..3).any(|axis| {
                let lim = [1.0, 1.5, 0.5][axis];
                f.iter().all(|&i| m.node(i)[axis] == 0.0) || f.iter().all(|&i| m.node(i)[axis] == lim)
            });
            assert_eq!(c, if on_boundary { 1 } else { 2 }, "face {f:?}");
        }
    }

    #[test]
    fn boundary_matches_coordinate_test() {
        let m = box_mesh(3, 2, 2, 1.0, 2.0, 3.0).unwrap();
        let lens = [1.0, 2.0, 3.0];
        for i in 0..m.n_nodes() {
            let on = m.node(i).iter().zip(lens).any(|(&x, l)| x == 0.0 || x == l);
            assert_eq!(on, m.is_boundary(i));
        }
    }

    #[test]
    fn gradients_sum_to_zero_and_reproduce_linears() {
        let m = box_mesh(2, 2, 2, 1.0, 1.0, 1.0).unwrap();
        for e in 0..m.n_elements() {
            // ∇x = Σ_a x_a ∇λ_a = e_1
            let mut gx = [0.0; 3];
            for (a, &i) in m.element(e).iter().enumerate() {
                for c in 0..3 {
                    gx[c] += m.node(i)[0] * m.grad(e, a)[c];
                }
            }
            assert!((gx[0] - 1.0).abs() < 1e-12 && gx[1].abs() < 1e-12 && gx[2].abs() < 1e-12);
        }
    }

    #[test]
    fn tagging_by_centroid() {
        let m = rect_mesh(2, 2, 1.0, 1.0).unwrap();
        let t = tag_elements(&m, |c| if c[0] < 0.5 { Tag::Fluid } else { Tag::Solid });
        assert_eq!(t.tags().iter().filter(|&&x| x == Tag::Fluid).count(), 4);
        assert_eq!(t.tags().iter().filter(|&&x| x == Tag::Solid).count(), 4);

        let m = interval_mesh(4, 1.0).unwrap();
        let t = tag_elements(&m, |c| if c[0] > 0.25 && c[0] < 0.75 { Tag::Nonlinear } else { Tag::Default });
        let nl: Vec<usize> = (0..4).filter(|&e| t.tag(e) == Tag::Nonlinear).collect();
        assert_eq!(nl, vec![1, 2]);
        assert_eq!(t.tag_interface_nodes(), vec![1, 3]);

        let d = tag_elements(&m, |_| Tag::Default);
        assert!(d.tags().iter().all(|&x| x == Tag::Default));
    }

    #[test]
    fn refinement_halves_diameter() {
        let a = rect_mesh(3, 2, 1.0, 1.0).unwrap().max_diameter();
        let b = rect_mesh(6, 4, 1.0, 1.0).unwrap().max_diameter();
        assert!((a - 2.0 * b).abs() < 1e-14);
    }

    #[test]
    fn text_roundtrip() {
        let m = tag_elements(&rect_mesh(2, 1, 1.0, 1.0).unwrap(), |c| {
            if c[0] < 0.5 { Tag::Fluid } else { Tag::Solid }
        });
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = Mesh::read_text(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.n_nodes(), m.n_nodes());
        assert_eq!(back.tags(), m.tags());
        for e in 0..m.n_elements() {
            assert_eq!(back.element(e), m.element(e));
        }
    }
}
