//! Closed triangulated surfaces, rough metrics and metric comparison.
//!
//! Geometry is carried by an embedding (or a periodic planar layout for the
//! flat torus) which induces the smooth background metric. A [`RoughMetric`]
//! is a piecewise-constant symmetric tensor per triangle, expressed in the
//! triangle's orthonormal frame of the embedding.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{self, Mat2, Sym2, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Sphere,
    Torus,
}

impl Topology {
    pub fn euler_characteristic(self) -> i64 {
        match self {
            Topology::Sphere => 2,
            Topology::Torus => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Sphere => "sphere",
            Topology::Torus => "torus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sphere" => Some(Topology::Sphere),
            "torus" => Some(Topology::Torus),
            _ => None,
        }
    }
}

/// Orthonormal frame of one triangle with the 2D coordinates of its corners.
#[derive(Debug, Clone, Copy)]
pub struct TriangleFrame {
    pub e1: Vec3,
    pub e2: Vec3,
    pub normal: Vec3,
    /// Corner coordinates in `(e1, e2)`, first corner at the origin.
    pub coords: [[f64; 2]; 3],
    /// Area induced by the embedding.
    pub area: f64,
}

impl TriangleFrame {
    /// Local coordinates of an ambient vector after projection onto the triangle plane.
    pub fn project(&self, v: Vec3) -> [f64; 2] {
        [tensor::dot(v, self.e1), tensor::dot(v, self.e2)]
    }
}

#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    topology: Topology,
    period: Option<[f64; 2]>,
    singular: Vec<usize>,
    edges: Vec<[usize; 2]>,
    vertex_triangles: Vec<Vec<usize>>,
    vertex_neighbors: Vec<Vec<usize>>,
    frames: Vec<TriangleFrame>,
}

impl TriangleMesh {
    /// Builds and validates a closed, consistently oriented mesh.
    ///
    /// `period` turns the mesh into a periodic planar layout: vertex positions
    /// live in `z = 0` and edge vectors use the minimum image.
    pub fn new(
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        topology: Topology,
        period: Option<[f64; 2]>,
    ) -> Result<Self> {
        let nv = vertices.len();
        if nv < 4 || triangles.is_empty() {
            return Err(Error::InvalidMesh("too few vertices or triangles".into()));
        }
        if vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidMesh(format!("triangle {t} references a missing vertex")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!("triangle {t} repeats a vertex")));
            }
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if directed.insert((a, b), t).is_some() {
                    return Err(Error::InvalidMesh(format!(
                        "directed edge ({a},{b}) traversed twice: inconsistent orientation or non-manifold edge"
                    )));
                }
            }
        }
        let mut edges = Vec::with_capacity(directed.len() / 2);
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) {
                return Err(Error::InvalidMesh(format!("edge ({a},{b}) is a boundary edge")));
            }
            if a < b {
                edges.push([a, b]);
            }
        }
        edges.sort_unstable();

        let chi = nv as i64 - edges.len() as i64 + triangles.len() as i64;
        if chi != topology.euler_characteristic() {
            return Err(Error::InvalidMesh(format!(
                "Euler characteristic {chi} does not match declared {} topology",
                topology.as_str()
            )));
        }

        let mut vertex_triangles = vec![Vec::new(); nv];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                vertex_triangles[v].push(t);
            }
        }
        let mut vertex_neighbors = vec![Vec::new(); nv];
        for &[a, b] in &edges {
            vertex_neighbors[a].push(b);
            vertex_neighbors[b].push(a);
        }
        if let Some(v) = vertex_triangles.iter().position(|ts| ts.is_empty()) {
            return Err(Error::InvalidMesh(format!("vertex {v} is isolated")));
        }

        let mut mesh = Self {
            vertices,
            triangles,
            topology,
            period,
            singular: Vec::new(),
            edges,
            vertex_triangles,
            vertex_neighbors,
            frames: Vec::new(),
        };
        let frames: Vec<_> = (0..mesh.triangles.len()).map(|t| mesh.compute_frame(t)).collect();
        for (t, f) in frames.iter().enumerate() {
            if !(f.area > 0.0) || !f.area.is_finite() {
                return Err(Error::InvalidMesh(format!("triangle {t} has non-positive area")));
            }
        }
        mesh.frames = frames;
        Ok(mesh)
    }

    /// Declares vertices where the geometry is singular (excluded from flow computations).
    pub fn with_singular(mut self, singular: Vec<usize>) -> Result<Self> {
        if singular.iter().any(|&v| v >= self.vertices.len()) {
            return Err(Error::InvalidMesh("singular vertex out of range".into()));
        }
        self.singular = singular;
        Ok(self)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn period(&self) -> Option<[f64; 2]> {
        self.period
    }

    pub fn singular(&self) -> &[usize] {
        &self.singular
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertex_triangles(&self, v: usize) -> &[usize] {
        &self.vertex_triangles[v]
    }

    pub fn vertex_neighbors(&self, v: usize) -> &[usize] {
        &self.vertex_neighbors[v]
    }

    pub fn frame(&self, t: usize) -> &TriangleFrame {
        &self.frames[t]
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges.len() as i64 + self.triangles.len() as i64
    }

    /// Edge vector from `a` to `b`, using the minimum image on periodic layouts.
    pub fn edge_vector(&self, a: usize, b: usize) -> Vec3 {
        let mut d = tensor::sub(self.vertices[b], self.vertices[a]);
        if let Some(p) = self.period {
            for k in 0..2 {
                d[k] -= p[k] * (d[k] / p[k]).round();
            }
        }
        d
    }

    pub fn edge_length(&self, a: usize, b: usize) -> f64 {
        tensor::norm(self.edge_vector(a, b))
    }

    fn compute_frame(&self, t: usize) -> TriangleFrame {
        let [a, b, c] = self.triangles[t];
        let d1 = self.edge_vector(a, b);
        let d2 = self.edge_vector(a, c);
        let n = tensor::cross(d1, d2);
        let twice_area = tensor::norm(n);
        let normal = tensor::scale(n, 1.0 / twice_area);
        let e1 = tensor::normalize(d1);
        let e2 = tensor::cross(normal, e1);
        TriangleFrame {
            e1,
            e2,
            normal,
            coords: [
                [0.0, 0.0],
                [tensor::dot(d1, e1), 0.0],
                [tensor::dot(d2, e1), tensor::dot(d2, e2)],
            ],
            area: 0.5 * twice_area,
        }
    }

    /// Area-weighted unit normal at a vertex.
    pub fn vertex_normal(&self, v: usize) -> Vec3 {
        let mut n = [0.0; 3];
        for &t in &self.vertex_triangles[v] {
            let f = &self.frames[t];
            n = tensor::add(n, tensor::scale(f.normal, f.area));
        }
        tensor::normalize(n)
    }

    /// Orthonormal tangent frame at a vertex, orthonormal for the background metric.
    pub fn vertex_frame(&self, v: usize) -> [Vec3; 2] {
        let n = self.vertex_normal(v);
        // pick the coordinate axis least aligned with the normal
        let axis = (0..3)
            .min_by(|&i, &j| n[i].abs().total_cmp(&n[j].abs()))
            .unwrap();
        let mut a = [0.0; 3];
        a[axis] = 1.0;
        let f1 = tensor::normalize(tensor::sub(a, tensor::scale(n, tensor::dot(a, n))));
        let f2 = tensor::cross(n, f1);
        [f1, f2]
    }

    pub fn centroid(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t];
        let p = self.vertices[a];
        let s = tensor::add(self.edge_vector(a, b), self.edge_vector(a, c));
        tensor::add(p, tensor::scale(s, 1.0 / 3.0))
    }

    pub fn mean_edge_length(&self) -> f64 {
        self.edges.iter().map(|&[a, b]| self.edge_length(a, b)).sum::<f64>() / self.edges.len() as f64
    }

    pub fn total_area(&self) -> f64 {
        self.frames.iter().map(|f| f.area).sum()
    }

    /// Vertices whose closed 1-ring avoids every singular vertex.
    pub fn nonsingular_interior(&self, exclusion_rings: usize) -> Vec<usize> {
        let mut excluded = vec![false; self.num_vertices()];
        let mut frontier: Vec<usize> = self.singular.clone();
        for &s in &frontier {
            excluded[s] = true;
        }
        for _ in 0..exclusion_rings {
            let mut next = Vec::new();
            for &v in &frontier {
                for &w in &self.vertex_neighbors[v] {
                    if !excluded[w] {
                        excluded[w] = true;
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        (0..self.num_vertices()).filter(|&v| !excluded[v]).collect()
    }
}

/// Largest supported icosphere subdivision level.
pub const MAX_SUBDIVISIONS: u32 = 7;

fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw: [Vec3; 12] = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    // rotate so that vertex 0 sits on the north pole
    let top = tensor::normalize(raw[0]);
    let z = [0.0, 0.0, 1.0];
    let axis = tensor::cross(top, z);
    let s = tensor::norm(axis);
    let c = tensor::dot(top, z);
    let k = tensor::scale(axis, 1.0 / s);
    let rotate = |v: Vec3| -> Vec3 {
        // Rodrigues
        let kv = tensor::cross(k, v);
        let kkv = tensor::dot(k, v);
        tensor::add(
            tensor::add(tensor::scale(v, c), tensor::scale(kv, s)),
            tensor::scale(k, kkv * (1.0 - c)),
        )
    };
    let verts = raw.iter().map(|&v| rotate(tensor::normalize(v))).collect();
    (verts, faces)
}

/// Geodesic icosphere of the unit sphere with `10 * 4^s + 2` vertices.
///
/// Vertex 0 is the north pole.
pub fn build_icosphere(subdivisions: u32) -> Result<TriangleMesh> {
    if subdivisions > MAX_SUBDIVISIONS {
        return Err(Error::OutOfRange(format!(
            "subdivisions {subdivisions} outside [0, {MAX_SUBDIVISIONS}]"
        )));
    }
    let (mut verts, mut faces) = icosahedron();
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                verts.push(tensor::normalize(tensor::add(verts[a], verts[b])));
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    TriangleMesh::new(verts, faces, Topology::Sphere, None)
}

/// Regular tetrahedron inscribed in the unit sphere.
pub fn build_tetrahedron() -> Result<TriangleMesh> {
    let s = 1.0 / 3f64.sqrt();
    let verts = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
    let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    TriangleMesh::new(verts, faces, Topology::Sphere, None)
}

/// Flat torus `[0, length)^2` with an `n x n` periodic grid, each cell split along its diagonal.
pub fn build_flat_torus(n: usize, length: f64) -> Result<TriangleMesh> {
    if n < 3 {
        return Err(Error::OutOfRange(format!("torus grid size {n} < 3")));
    }
    if !(length > 0.0) {
        return Err(Error::OutOfRange("torus length must be positive".into()));
    }
    let h = length / n as f64;
    let id = |i: usize, j: usize| (j % n) * n + (i % n);
    let verts = (0..n * n).map(|k| [(k % n) as f64 * h, (k / n) as f64 * h, 0.0]).collect();
    let mut faces = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
        }
    }
    TriangleMesh::new(verts, faces, Topology::Torus, Some([length, length]))
}

/// Per-triangle symmetric positive-definite metric tensors in each triangle's embedding frame.
#[derive(Debug, Clone)]
pub struct RoughMetric {
    tensors: Vec<Sym2>,
    kappa_lo: f64,
    kappa_hi: f64,
}

impl RoughMetric {
    pub fn new(tensors: Vec<Sym2>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::InvalidMetric("no tensors".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for (t, g) in tensors.iter().enumerate() {
            let (l0, l1) = g.eigenvalues();
            if !(l0 > 0.0) || !l1.is_finite() {
                return Err(Error::InvalidMetric(format!(
                    "tensor on triangle {t} is not positive definite (eigenvalues {l0:e}, {l1:e})"
                )));
            }
            lo = lo.min(l0);
            hi = hi.max(l1);
        }
        Ok(Self {
            tensors,
            kappa_lo: lo,
            kappa_hi: hi,
        })
    }

    /// The metric induced by the embedding.
    pub fn induced(mesh: &TriangleMesh) -> Self {
        Self {
            tensors: vec![Sym2::IDENTITY; mesh.num_triangles()],
            kappa_lo: 1.0,
            kappa_hi: 1.0,
        }
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.tensors.iter().map(|g| g.scale(s)).collect())
    }

    pub fn tensors(&self) -> &[Sym2] {
        &self.tensors
    }

    pub fn tensor(&self, t: usize) -> &Sym2 {
        &self.tensors[t]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn kappa_lo(&self) -> f64 {
        self.kappa_lo
    }

    pub fn kappa_hi(&self) -> f64 {
        self.kappa_hi
    }

    /// Measure of triangle `t`: `sqrt(det g)` times the reference area.
    pub fn area(&self, mesh: &TriangleMesh, t: usize) -> f64 {
        self.tensors[t].det().sqrt() * mesh.frame(t).area
    }

    pub fn check_mesh(&self, mesh: &TriangleMesh) -> Result<()> {
        if self.tensors.len() != mesh.num_triangles() {
            return Err(Error::DimensionMismatch(format!(
                "metric has {} tensors, mesh has {} triangles",
                self.tensors.len(),
                mesh.num_triangles()
            )));
        }
        Ok(())
    }
}

/// Output of [`build_cone_sphere`].
#[derive(Debug, Clone)]
pub struct ConeSphere {
    pub mesh: TriangleMesh,
    pub metric: RoughMetric,
    pub apex: usize,
}

/// Unit icosphere whose rough metric carries a cone of total angle `cone_angle` at the north pole.
///
/// In geodesic polar coordinates `(r, θ)` about the pole the metric is
/// `dr² + f(r)² sin²r dθ²` with `f(0) = cone_angle / 2π` blended smoothly to
/// `f = 1` at `r = π/2`; the metric is smooth away from the apex.
pub fn build_cone_sphere(cone_angle: f64, subdivisions: u32) -> Result<ConeSphere> {
    if !(cone_angle >= 0.05 && cone_angle <= 2.0 * PI) {
        return Err(Error::OutOfRange(format!(
            "cone angle {cone_angle} outside [0.05, 2π]"
        )));
    }
    let mesh = build_icosphere(subdivisions)?.with_singular(vec![0])?;
    let ratio = cone_angle / (2.0 * PI);
    let cutoff = PI / 2.0;
    let pole = [0.0, 0.0, 1.0];
    let tensors = (0..mesh.num_triangles())
        .map(|t| {
            let c = mesh.centroid(t);
            let r = tensor::dot(tensor::normalize(c), pole).clamp(-1.0, 1.0).acos();
            let blend = if r < cutoff {
                (0.5 * PI * r / cutoff).cos().powi(2)
            } else {
                0.0
            };
            let f = 1.0 + (ratio - 1.0) * blend;
            let frame = mesh.frame(t);
            // meridian direction projected to the triangle plane
            let down = tensor::sub(tensor::scale(frame.normal, tensor::dot(pole, frame.normal)), pole);
            let er = frame.project(down);
            let len = (er[0] * er[0] + er[1] * er[1]).sqrt();
            let er = [er[0] / len, er[1] / len];
            let et = [-er[1], er[0]];
            let q = Mat2([[er[0], et[0]], [er[1], et[1]]]);
            Sym2::new(1.0, 0.0, f * f).congruence(&q.transpose())
        })
        .collect();
    Ok(ConeSphere {
        mesh,
        metric: RoughMetric::new(tensors)?,
        apex: 0,
    })
}

/// Two metrics on one mesh together with their comparison tensor, density and closeness.
#[derive(Debug, Clone)]
pub struct MetricPair {
    pub metric_a: RoughMetric,
    pub metric_b: RoughMetric,
    /// `B` per triangle in an `a`-orthonormal frame (symmetric there).
    pub b_field: Vec<Sym2>,
    /// `sqrt(det B)`, the density of `μ_b` against `μ_a`.
    pub theta: Vec<f64>,
    /// Smallest `C ≥ 1` with `C⁻¹|u|_a ≤ |u|_b ≤ C|u|_a`.
    pub closeness: f64,
}

impl MetricPair {
    /// `B` in the triangle's embedding frame: `G_a⁻¹ G_b`, so that `a(Bu, v) = b(u, v)`.
    pub fn b_local(&self, t: usize) -> Mat2 {
        let ga = self.metric_a.tensor(t);
        ga.inverse().to_mat().mul(&self.metric_b.tensor(t).to_mat())
    }

    /// Coefficient `θ B⁻¹` acting on `a`-orthonormal covector coordinates.
    ///
    /// With it, `-div_a(θ B⁻¹ ∇u)` equals `θ Δ_b u` in weak form.
    pub fn divergence_coefficient(&self, t: usize) -> Sym2 {
        self.b_field[t].inverse().scale(self.theta[t])
    }
}

/// Builds `B`, `θ` and `C` for two metrics on the same mesh.
pub fn compare_metrics(a: &RoughMetric, b: &RoughMetric) -> Result<MetricPair> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "metrics have {} and {} tensors",
            a.len(),
            b.len()
        )));
    }
    let mut b_field = Vec::with_capacity(a.len());
    let mut theta = Vec::with_capacity(a.len());
    let mut closeness = 1.0f64;
    for (ga, gb) in a.tensors().iter().zip(b.tensors()) {
        let w = ga.inv_sqrt();
        let bhat = gb.congruence(&w.to_mat());
        let (l0, l1) = bhat.eigenvalues();
        closeness = closeness.max(l1.sqrt()).max(1.0 / l0.sqrt());
        theta.push(bhat.det().sqrt());
        b_field.push(bhat);
    }
    Ok(MetricPair {
        metric_a: a.clone(),
        metric_b: b.clone(),
        b_field,
        theta,
        closeness,
    })
}

/// First line of every mesh file.
pub const MESH_HEADER: &str = "geoflow-mesh v1";

/// Writes the text mesh format; numbers carry 17 significant digits so that reading
/// the file back reproduces every value bit for bit.
pub fn write_mesh<W: Write>(mut w: W, mesh: &TriangleMesh, metric: Option<&RoughMetric>) -> std::io::Result<()> {
    writeln!(w, "{MESH_HEADER}")?;
    writeln!(w, "topology {}", mesh.topology().as_str())?;
    if let Some([lx, ly]) = mesh.period() {
        writeln!(w, "period {lx:.16e} {ly:.16e}")?;
    }
    if !mesh.singular().is_empty() {
        let ids: Vec<String> = mesh.singular().iter().map(|v| v.to_string()).collect();
        writeln!(w, "singular {}", ids.join(" "))?;
    }
    writeln!(w, "{}", mesh.num_vertices())?;
    for p in mesh.vertices() {
        writeln!(w, "v {:.16e} {:.16e} {:.16e}", p[0], p[1], p[2])?;
    }
    writeln!(w, "{}", mesh.num_triangles())?;
    for t in mesh.triangles() {
        writeln!(w, "f {} {} {}", t[0], t[1], t[2])?;
    }
    if let Some(m) = metric {
        for g in m.tensors() {
            writeln!(w, "m {:.16e} {:.16e} {:.16e}", g.xx, g.xy, g.yy)?;
        }
    }
    Ok(())
}

/// Parses the text mesh format written by [`write_mesh`].
pub fn read_mesh(text: &str) -> Result<(TriangleMesh, Option<RoughMetric>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let bad = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    match lines.next() {
        Some((_, l)) if l == MESH_HEADER => {}
        Some((n, _)) => return Err(bad(n, "missing geoflow-mesh v1 header")),
        None => return Err(bad(0, "empty mesh file")),
    }
    let floats = |n: usize, fields: &[&str], count: usize| -> Result<Vec<f64>> {
        if fields.len() != count {
            return Err(bad(n, &format!("expected {count} numbers")));
        }
        fields
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(n, &format!("bad number {f:?}"))))
            .collect()
    };
    let count = |n: usize, l: &str| l.parse::<usize>().map_err(|_| bad(n, "expected a count"));
    let mut topology = Topology::Sphere;
    let mut period = None;
    let mut singular = Vec::new();
    let nv = loop {
        let (n, l) = lines.next().ok_or_else(|| bad(0, "missing vertex count"))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        match fields[0] {
            "topology" => {
                topology = fields
                    .get(1)
                    .and_then(|s| Topology::parse(s))
                    .ok_or_else(|| bad(n, "unknown topology"))?;
            }
            "period" => {
                let p = floats(n, &fields[1..], 2)?;
                period = Some([p[0], p[1]]);
            }
            "singular" => {
                singular = fields[1..]
                    .iter()
                    .map(|f| f.parse::<usize>().map_err(|_| bad(n, "bad vertex id")))
                    .collect::<Result<_>>()?;
            }
            _ => break count(n, l)?,
        }
    };
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (n, l) = lines.next().ok_or_else(|| bad(0, "missing vertex line"))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields[0] != "v" {
            return Err(bad(n, "expected a vertex line"));
        }
        let p = floats(n, &fields[1..], 3)?;
        vertices.push([p[0], p[1], p[2]]);
    }
    let (n, l) = lines.next().ok_or_else(|| bad(0, "missing triangle count"))?;
    let nt = count(n, l)?;
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (n, l) = lines.next().ok_or_else(|| bad(0, "missing triangle line"))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields[0] != "f" || fields.len() != 4 {
            return Err(bad(n, "expected a triangle line"));
        }
        let mut tri = [0usize; 3];
        for (k, f) in fields[1..].iter().enumerate() {
            tri[k] = f.parse().map_err(|_| bad(n, "bad vertex index"))?;
        }
        triangles.push(tri);
    }
    let mut tensors = Vec::new();
    for (n, l) in lines {
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields[0] != "m" {
            return Err(bad(n, "expected a metric line"));
        }
        let g = floats(n, &fields[1..], 3)?;
        tensors.push(Sym2::new(g[0], g[1], g[2]));
    }
    let mut mesh = TriangleMesh::new(vertices, triangles, topology, period)?;
    if !singular.is_empty() {
        mesh = mesh.with_singular(singular)?;
    }
    let metric = if tensors.is_empty() {
        None
    } else {
        if tensors.len() != nt {
            return Err(Error::DimensionMismatch(format!("{} metric lines for {nt} triangles", tensors.len())));
        }
        let m = RoughMetric::new(tensors)?;
        m.check_mesh(&mesh)?;
        Some(m)
    };
    Ok((mesh, metric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        let m0 = build_icosphere(0).unwrap();
        assert_eq!((m0.num_vertices(), m0.num_triangles()), (12, 20));
        let m2 = build_icosphere(2).unwrap();
        assert_eq!((m2.num_vertices(), m2.num_triangles()), (162, 320));
        let m3 = build_icosphere(3).unwrap();
        assert_eq!(m3.euler_characteristic(), 2);
        assert_eq!(m3.num_vertices(), 10 * 4usize.pow(3) + 2);
        assert!(matches!(build_icosphere(8), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn icosphere_north_pole_and_outward_orientation() {
        let m = build_icosphere(1).unwrap();
        assert!(tensor::norm(tensor::sub(m.vertices()[0], [0.0, 0.0, 1.0])) < 1e-14);
        for t in 0..m.num_triangles() {
            let f = m.frame(t);
            assert!(tensor::dot(f.normal, m.centroid(t)) > 0.0);
        }
    }

    #[test]
    fn torus_is_flat_and_closed() {
        let m = build_flat_torus(6, 3.0).unwrap();
        assert_eq!(m.euler_characteristic(), 0);
        assert!((m.total_area() - 9.0).abs() < 1e-12);
        for t in 0..m.num_triangles() {
            assert!((m.frame(t).normal[2] - 1.0).abs() < 1e-14);
        }
        assert!(build_flat_torus(2, 1.0).is_err());
    }

    #[test]
    fn rejects_open_and_misoriented_meshes() {
        let s = 1.0 / 3f64.sqrt();
        let verts = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
        let open = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3]];
        assert!(TriangleMesh::new(verts.clone(), open, Topology::Sphere, None).is_err());
        let flipped = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 2, 3]];
        assert!(TriangleMesh::new(verts.clone(), flipped, Topology::Sphere, None).is_err());
        let ok = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        assert!(TriangleMesh::new(verts.clone(), ok.clone(), Topology::Torus, None).is_err());
        assert!(TriangleMesh::new(verts, ok, Topology::Sphere, None).is_ok());
    }

    #[test]
    fn cone_sphere_full_angle_is_round() {
        let cs = build_cone_sphere(2.0 * PI, 2).unwrap();
        let pair = compare_metrics(&RoughMetric::induced(&cs.mesh), &cs.metric).unwrap();
        assert!((pair.closeness - 1.0).abs() < 1e-12);
        assert!(cs.metric.kappa_lo() > 0.0);
    }

    #[test]
    fn cone_sphere_half_angle_is_elliptic_away_from_apex() {
        for s in 0..4 {
            let cs = build_cone_sphere(PI, s).unwrap();
            assert_eq!(cs.mesh.singular(), &[0]);
            for t in 0..cs.mesh.num_triangles() {
                if cs.mesh.triangles()[t].contains(&cs.apex) {
                    continue;
                }
                let (l0, l1) = cs.metric.tensor(t).eigenvalues();
                assert!(l0 >= 0.25 - 1e-12 && l1 <= 1.0 + 1e-12, "triangle {t}: {l0} {l1}");
            }
            assert!(cs.metric.kappa_lo() > 0.0);
        }
        assert!(build_cone_sphere(0.01, 1).is_err());
    }

    #[test]
    fn compare_identical_and_scaled() {
        let m = build_icosphere(1).unwrap();
        let g = RoughMetric::induced(&m);
        let same = compare_metrics(&g, &g).unwrap();
        assert!(same.b_field.iter().all(|b| b.max_abs_diff(&Sym2::IDENTITY) < 1e-15));
        assert!(same.theta.iter().all(|&t| (t - 1.0).abs() < 1e-15));
        assert_eq!(same.closeness, 1.0);
        let four = compare_metrics(&g, &g.scaled(4.0).unwrap()).unwrap();
        assert!(four.b_field.iter().all(|b| b.max_abs_diff(&Sym2::scaled_identity(4.0)) < 1e-14));
        assert!(four.theta.iter().all(|&t| (t - 4.0).abs() < 1e-14));
        assert!((four.closeness - 2.0).abs() < 1e-14);
    }

    #[test]
    fn compare_rejects_mismatch() {
        let a = RoughMetric::induced(&build_icosphere(0).unwrap());
        let b = RoughMetric::induced(&build_icosphere(1).unwrap());
        assert!(matches!(compare_metrics(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn mesh_file_round_trip_is_exact() {
        let cs = build_cone_sphere(2.0, 1).unwrap();
        let mut text = Vec::new();
        write_mesh(&mut text, &cs.mesh, Some(&cs.metric)).unwrap();
        let text = String::from_utf8(text).unwrap();
        let (mesh, metric) = read_mesh(&text).unwrap();
        assert_eq!(mesh.vertices(), cs.mesh.vertices());
        assert_eq!(mesh.singular(), &[0]);
        assert_eq!(metric.unwrap().tensors(), cs.metric.tensors());
        let mut again = Vec::new();
        write_mesh(&mut again, &mesh, Some(&cs.metric)).unwrap();
        assert_eq!(String::from_utf8(again).unwrap(), text);

        let torus = build_flat_torus(4, 2.5).unwrap();
        let mut t = Vec::new();
        write_mesh(&mut t, &torus, None).unwrap();
        let (back, none) = read_mesh(std::str::from_utf8(&t).unwrap()).unwrap();
        assert!(none.is_none());
        assert_eq!(back.period(), Some([2.5, 2.5]));
        assert!(matches!(read_mesh("nope\n"), Err(Error::Parse { line: 1, .. })));
    }
}
