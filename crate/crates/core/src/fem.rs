//! Finite-element solve of the two-stage backward equation.
//!
//! The diffusion approximation of the k = 2 model lives on the truncated
//! simplex `{y >= 0 : max(y1, y2) >= eps, y1 + y2 <= N}`. The mean exit time
//! vanishes on the small corner where `max(y1, y2) = eps` and satisfies a
//! reflecting (conormal) condition elsewhere. We discretize the weak form
//!
//! `1/2 int grad(w) . B grad(tau) - int (A - div(B)/2) . grad(tau) w = int w`
//!
//! with P2 (default) or P1 Lagrange elements on a constrained Delaunay mesh.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use spade::{
    AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation,
};

use crate::error::{Error, Result};
use crate::linalg::bicgstab;
use crate::model::ModelParams;
use crate::par::{map_range, Execution};

/// Truncated-simplex domain in individuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain2D {
    pub n_pop: f64,
    pub epsilon: f64,
}

impl Domain2D {
    pub fn new(n_pop: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && n_pop > 2.0 * epsilon) {
            return Err(Error::InvalidArgument(format!("need 0 < eps < N/2, got eps = {epsilon}, N = {n_pop}")));
        }
        Ok(Self { n_pop, epsilon })
    }

    pub fn for_params(params: &ModelParams) -> Result<Self> {
        Self::new(params.n(), 0.5)
    }

    /// `N^2 / 2 - eps^2`.
    pub fn area(&self) -> f64 {
        0.5 * self.n_pop * self.n_pop - self.epsilon * self.epsilon
    }

    /// The five boundary segments in counter-clockwise order.
    pub fn segments(&self, d: &BoundaryDensities) -> Vec<Segment> {
        let (n, e) = (self.n_pop, self.epsilon);
        vec![
            Segment { name: "B1a", start: [0.0, e], end: [e, e], count: d.b1a, absorbing: true },
            Segment { name: "B1b", start: [e, e], end: [e, 0.0], count: d.b1b, absorbing: true },
            Segment { name: "B2", start: [e, 0.0], end: [n, 0.0], count: d.b2, absorbing: false },
            Segment { name: "B3", start: [n, 0.0], end: [0.0, n], count: d.b3, absorbing: false },
            Segment { name: "B4", start: [0.0, n], end: [0.0, e], count: d.b4, absorbing: false },
        ]
    }
}

/// Number of boundary subdivisions per segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryDensities {
    pub b1a: usize,
    pub b1b: usize,
    pub b2: usize,
    pub b3: usize,
    pub b4: usize,
}

impl Default for BoundaryDensities {
    fn default() -> Self {
        Self { b1a: 10, b1b: 10, b2: 100, b3: 100, b4: 100 }
    }
}

impl BoundaryDensities {
    pub fn scaled(&self, factor: usize) -> Self {
        Self {
            b1a: self.b1a * factor,
            b1b: self.b1b * factor,
            b2: self.b2 * factor,
            b3: self.b3 * factor,
            b4: self.b4 * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub name: &'static str,
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub count: usize,
    /// Dirichlet (absorbing) rather than reflecting.
    pub absorbing: bool,
}

impl Segment {
    fn length(&self) -> f64 {
        (self.end[0] - self.start[0]).hypot(self.end[1] - self.start[1])
    }

    /// Distance from `p` to the segment.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let d = [self.end[0] - self.start[0], self.end[1] - self.start[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = (((p[0] - self.start[0]) * d[0] + (p[1] - self.start[1]) * d[1]) / len2).clamp(0.0, 1.0);
        (p[0] - self.start[0] - t * d[0]).hypot(p[1] - self.start[1] - t * d[1])
    }
}

/// Conforming triangulation with counter-clockwise triangles.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    segments: Vec<Segment>,
    tol: f64,
}

impl Mesh {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| signed_area(&self.vertices, t)).sum()
    }

    /// Vertices on edges that belong to exactly one triangle.
    pub fn boundary_vertices(&self) -> Vec<usize> {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                *count.entry(edge_key(t[e], t[(e + 1) % 3])).or_default() += 1;
            }
        }
        let mut set: HashSet<usize> = HashSet::new();
        for ((a, b), c) in count {
            if c == 1 {
                set.insert(a);
                set.insert(b);
            }
        }
        let mut out: Vec<usize> = set.into_iter().collect();
        out.sort_unstable();
        out
    }

    /// Longest edge over all triangles.
    pub fn max_edge(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|t| (0..3).map(move |e| (t[e], t[(e + 1) % 3])))
            .map(|(a, b)| dist(self.vertices[a], self.vertices[b]))
            .fold(0.0, f64::max)
    }

    fn on_absorbing(&self, p: [f64; 2]) -> bool {
        self.segments.iter().any(|s| s.absorbing && s.distance(p) <= self.tol)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn signed_area(v: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    let (a, b, c) = (v[t[0]], v[t[1]], v[t[2]]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Triangulates the domain with the given boundary subdivision.
pub fn build_mesh(domain: &Domain2D, densities: &BoundaryDensities) -> Result<Mesh> {
    mesh_polygon(domain.segments(densities))
}

/// Meshes the closed polygon traced by `segments` (end of each = start of
/// the next). Interior triangles are limited to the area of an equilateral
/// triangle with the coarsest boundary spacing.
pub(crate) fn mesh_polygon(segments: Vec<Segment>) -> Result<Mesh> {
    if segments.iter().any(|s| s.count < 4) {
        return Err(Error::InvalidArgument("boundary densities must be at least 4".into()));
    }
    let mut cdt = ConstrainedDelaunayTriangulation::<Point2<f64>>::new();
    let mut handles = Vec::new();
    for s in &segments {
        for j in 0..s.count {
            let t = j as f64 / s.count as f64;
            let p = Point2::new(s.start[0] + t * (s.end[0] - s.start[0]), s.start[1] + t * (s.end[1] - s.start[1]));
            handles.push(cdt.insert(p).map_err(|e| Error::MeshFailure(format!("{e:?}")))?);
        }
    }
    for j in 0..handles.len() {
        let (a, b) = (handles[j], handles[(j + 1) % handles.len()]);
        if a == b || !cdt.can_add_constraint(a, b) {
            return Err(Error::MeshFailure("boundary segments intersect or repeat a vertex".into()));
        }
        cdt.add_constraint(a, b);
    }
    let spacing = segments.iter().map(|s| s.length() / s.count as f64).fold(0.0, f64::max);
    let result = cdt.refine(
        RefinementParameters::<f64>::new()
            .with_max_allowed_area(0.25 * 3f64.sqrt() * spacing * spacing)
            .with_angle_limit(AngleLimit::from_deg(25.0))
            .exclude_outer_faces(true)
            .with_max_additional_vertices(20_000_000),
    );
    if !result.refinement_complete {
        return Err(Error::MeshFailure("refinement ran out of vertices".into()));
    }
    let excluded: HashSet<_> = result.excluded_faces.into_iter().collect();
    let vertices: Vec<[f64; 2]> = cdt
        .vertices()
        .map(|v| {
            let p = v.position();
            [p.x, p.y]
        })
        .collect();
    let mut triangles = Vec::new();
    for f in cdt.inner_faces() {
        if excluded.contains(&f.fix()) {
            continue;
        }
        let t = f.vertices().map(|v| v.fix().index());
        let area = signed_area(&vertices, &t);
        if !(area > 0.0) {
            return Err(Error::MeshFailure(format!("degenerate triangle of area {area:e}")));
        }
        triangles.push(t);
    }
    if triangles.is_empty() {
        return Err(Error::MeshFailure("no interior triangles".into()));
    }
    let scale = segments.iter().map(|s| s.length()).fold(0.0, f64::max);
    Ok(Mesh { vertices, triangles, segments, tol: 1e-9 * scale.max(1.0) })
}

/// Lagrange element order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Element {
    P1,
    #[default]
    P2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FemConfig {
    pub element: Element,
    /// Adds `1e-12 * max|diag|` to the diagonal before factoring. Off by
    /// default: a singular system is reported instead.
    pub diagonal_shift: bool,
    pub exec: Execution,
}

impl Default for FemConfig {
    fn default() -> Self {
        Self { element: Element::P2, diagonal_shift: false, exec: Execution::Parallel }
    }
}

/// Coefficients of a two-dimensional backward operator
/// `A . grad + 1/2 B : Hess`.
pub trait BackwardOperator: Sync {
    fn diffusion(&self, y: [f64; 2]) -> [[f64; 2]; 2];
    /// `A - div(B) / 2`, the drift left over after integrating by parts.
    fn effective_drift(&self, y: [f64; 2]) -> [f64; 2];
}

/// Diffusion approximation of the two-stage SIS chain.
#[derive(Debug, Clone, Copy)]
pub struct TwoStageSis {
    beta: f64,
    gamma: f64,
    n: f64,
}

impl TwoStageSis {
    pub fn new(params: &ModelParams) -> Result<Self> {
        if params.k_stages != 2 {
            return Err(Error::NotApplicable { method: "FEM", reason: "only k = 2 is implemented".into() });
        }
        if !(params.r0() > 0.0) {
            return Err(Error::NotApplicable { method: "FEM", reason: "needs R0 > 0".into() });
        }
        Ok(Self { beta: params.beta, gamma: params.gamma, n: params.n() })
    }

    pub fn drift(&self, y: [f64; 2]) -> [f64; 2] {
        let s = y[0] + y[1];
        let kg = 2.0 * self.gamma;
        [self.beta / self.n * s * (self.n - s) - kg * y[0], kg * (y[0] - y[1])]
    }
}

impl BackwardOperator for TwoStageSis {
    fn diffusion(&self, y: [f64; 2]) -> [[f64; 2]; 2] {
        let s = y[0] + y[1];
        let kg = 2.0 * self.gamma;
        let b12 = -kg * y[0];
        [[self.beta / self.n * s * (self.n - s) + kg * y[0], b12], [b12, kg * (y[0] + y[1])]]
    }

    fn effective_drift(&self, y: [f64; 2]) -> [f64; 2] {
        let s = y[0] + y[1];
        let kg = 2.0 * self.gamma;
        let a = self.drift(y);
        // div of row 1: d/dy1 B11 + d/dy2 B12; row 2: d/dy1 B21 + d/dy2 B22 = 0
        [a[0] - 0.5 * (self.beta / self.n * (self.n - 2.0 * s) + kg), a[1]]
    }
}

// 7-point rule, exact for degree 5 on triangles (barycentric, weights sum to 1)
fn quadrature() -> [([f64; 3], f64); 7] {
    let r = 15f64.sqrt();
    let (a1, b1) = ((6.0 - r) / 21.0, (9.0 + 2.0 * r) / 21.0);
    let (a2, b2) = ((6.0 + r) / 21.0, (9.0 - 2.0 * r) / 21.0);
    let (w1, w2) = ((155.0 - r) / 1200.0, (155.0 + r) / 1200.0);
    [
        ([1.0 / 3.0; 3], 9.0 / 40.0),
        ([a1, a1, b1], w1),
        ([a1, b1, a1], w1),
        ([b1, a1, a1], w1),
        ([a2, a2, b2], w2),
        ([a2, b2, a2], w2),
        ([b2, a2, a2], w2),
    ]
}

/// Degrees of freedom: vertices, then (for P2) edge midpoints.
#[derive(Debug, Clone)]
struct Dofs {
    element: Element,
    /// Per triangle: 3 vertex dofs then edges (1,2), (2,0), (0,1).
    local: Vec<[usize; 6]>,
    coords: Vec<[f64; 2]>,
}

impl Dofs {
    fn new(mesh: &Mesh, element: Element) -> Self {
        let mut coords = mesh.vertices.clone();
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        let local = mesh
            .triangles
            .iter()
            .map(|t| {
                let mut l = [t[0], t[1], t[2], 0, 0, 0];
                if element == Element::P2 {
                    for (slot, (a, b)) in [(t[1], t[2]), (t[2], t[0]), (t[0], t[1])].into_iter().enumerate() {
                        let next = coords.len();
                        let id = *edges.entry(edge_key(a, b)).or_insert(next);
                        if id == next {
                            let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
                            coords.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                        }
                        l[3 + slot] = id;
                    }
                }
                l
            })
            .collect();
        Self { element, local, coords }
    }

    fn per_element(&self) -> usize {
        match self.element {
            Element::P1 => 3,
            Element::P2 => 6,
        }
    }
}

/// Basis values and gradients at barycentric point `l`, given the constant
/// barycentric gradients `g`.
fn basis(element: Element, l: [f64; 3], g: &[[f64; 2]; 3]) -> ([f64; 6], [[f64; 2]; 6]) {
    let mut phi = [0.0; 6];
    let mut grad = [[0.0; 2]; 6];
    match element {
        Element::P1 => {
            for i in 0..3 {
                phi[i] = l[i];
                grad[i] = g[i];
            }
        }
        Element::P2 => {
            for i in 0..3 {
                phi[i] = l[i] * (2.0 * l[i] - 1.0);
                let s = 4.0 * l[i] - 1.0;
                grad[i] = [s * g[i][0], s * g[i][1]];
            }
            for (slot, (a, b)) in [(1, 2), (2, 0), (0, 1)].into_iter().enumerate() {
                phi[3 + slot] = 4.0 * l[a] * l[b];
                grad[3 + slot] = [
                    4.0 * (l[b] * g[a][0] + l[a] * g[b][0]),
                    4.0 * (l[b] * g[a][1] + l[a] * g[b][1]),
                ];
            }
        }
    }
    (phi, grad)
}

fn barycentric_gradients(p: [[f64; 2]; 3]) -> ([[f64; 2]; 3], f64) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        g[i] = [(p[j][1] - p[k][1]) / det, (p[k][0] - p[j][0]) / det];
    }
    (g, 0.5 * det)
}

/// Sparse matrix in compressed rows, duplicates summed.
#[derive(Debug, Clone)]
struct Csr {
    n: usize,
    ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut ptr = vec![0; n + 1];
        let mut col = Vec::with_capacity(t.len());
        let mut val: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = (usize::MAX, usize::MAX);
        for (r, c, v) in t {
            if (r, c) == last {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                ptr[r + 1] += 1;
                last = (r, c);
            }
        }
        for i in 0..n {
            ptr[i + 1] += ptr[i];
        }
        Self { n, ptr, col, val }
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (self.ptr[i]..self.ptr[i + 1]).map(|j| self.val[j] * x[self.col[j]]).sum())
            .collect()
    }

    /// `A x` with each row accumulated in doubled precision (Dot2), so the
    /// residual of a good solution is not swamped by cancellation.
    fn mul_accurate(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let (mut s, mut c) = (0.0f64, 0.0f64);
                for j in self.ptr[i]..self.ptr[i + 1] {
                    let p = self.val[j] * x[self.col[j]];
                    let pe = self.val[j].mul_add(x[self.col[j]], -p);
                    let t = s + p;
                    let z = t - s;
                    c += (s - (t - z)) + (p - z) + pe;
                    s = t;
                }
                s + c
            })
            .collect()
    }

    fn norm_frobenius(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn diag(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| (self.ptr[i]..self.ptr[i + 1]).find(|&j| self.col[j] == i).map_or(0.0, |j| self.val[j]))
            .collect()
    }
}

/// Nodal mean exit times on a mesh.
#[derive(Debug, Clone)]
pub struct MeshSolution {
    pub mesh: Mesh,
    /// Values at the mesh vertices.
    pub tau: Vec<f64>,
    pub element: Element,
    /// `|A x - b| / |b|`.
    pub relative_residual: f64,
    /// `|A x - b| / (|A| |x| + |b|)`, Frobenius norm for `A`; the solve
    /// contract is on this quantity.
    pub backward_error: f64,
    /// Most negative nodal value, if any falls below `-1e-6 max tau`.
    pub negative_overshoot: Option<f64>,
    dofs: Dofs,
    dof_values: Vec<f64>,
}

/// Solves the backward equation of the two-stage model on `mesh`.
pub fn solve_backward(params: &ModelParams, mesh: &Mesh) -> Result<MeshSolution> {
    solve_backward_with(&TwoStageSis::new(params)?, mesh, &FemConfig::default())
}

/// Solves `L tau = -1` for a general operator, `tau = 0` on absorbing
/// segments and the natural (conormal) condition elsewhere.
pub fn solve_backward_with<O: BackwardOperator>(op: &O, mesh: &Mesh, cfg: &FemConfig) -> Result<MeshSolution> {
    let dofs = Dofs::new(mesh, cfg.element);
    let n = dofs.coords.len();
    let dirichlet: Vec<bool> = dofs.coords.iter().map(|&p| mesh.on_absorbing(p)).collect();
    let (triplets, load) = assemble(op, mesh, &dofs, cfg.exec);

    let mut rhs = vec![0.0; n];
    for (i, v) in load {
        rhs[i] += v;
    }
    let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().filter(|&(r, _, _)| !dirichlet[r]).collect();
    for (i, &d) in dirichlet.iter().enumerate() {
        if d {
            entries.push((i, i, 1.0));
            rhs[i] = 0.0;
        }
    }
    let mut a = Csr::from_triplets(n, entries);
    if cfg.diagonal_shift {
        let shift = 1e-12 * a.diag().iter().fold(0.0f64, |m, d| m.max(d.abs()));
        for i in 0..n {
            if let Some(j) = (a.ptr[i]..a.ptr[i + 1]).find(|&j| a.col[j] == i) {
                a.val[j] += shift;
            }
        }
    }

    let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let anorm = a.norm_frobenius();
    let residual = |x: &[f64]| {
        let ax = a.mul_accurate(x);
        ax.iter().zip(&rhs).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    };
    // normwise backward error |r| / (|A| |x| + |b|)
    let backward = |x: &[f64]| {
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        residual(x) / (anorm * xnorm + bnorm)
    };
    let mut x = match sparse_lu_solve(&a, &rhs) {
        Ok(x) if backward(&x) < 1e-10 => x,
        other => {
            log::warn!("sparse LU unusable ({:?}), falling back to BiCGSTAB", other.err());
            bicgstab(|v| a.mul(v), &a.diag(), &rhs, 1e-12, 20_000)?.x
        }
    };
    // pivoting can leave rounding noise in the identity rows
    for (xi, &d) in x.iter_mut().zip(&dirichlet) {
        if d {
            *xi = 0.0;
        }
    }
    let backward_error = backward(&x);
    if !(backward_error < 1e-10) {
        return Err(Error::NumericalFailure { what: "FEM linear system", residual: backward_error });
    }
    let relative_residual = residual(&x) / bnorm;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { what: "FEM linear system", residual: f64::NAN });
    }
    let tau: Vec<f64> = x[..mesh.vertices.len()].to_vec();
    let max_tau = tau.iter().cloned().fold(0.0, f64::max);
    let min_tau = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let negative_overshoot = (min_tau < -1e-6 * max_tau).then_some(min_tau);
    if let Some(v) = negative_overshoot {
        log::warn!("FEM solution dips to {v:e} (max {max_tau:e})");
    }
    Ok(MeshSolution {
        mesh: mesh.clone(),
        tau,
        element: cfg.element,
        relative_residual,
        backward_error,
        negative_overshoot,
        dofs,
        dof_values: x,
    })
}

type Assembled = (Vec<(usize, usize, f64)>, Vec<(usize, f64)>);

fn assemble<O: BackwardOperator>(op: &O, mesh: &Mesh, dofs: &Dofs, exec: Execution) -> Assembled {
    let ne = dofs.per_element();
    let rule = quadrature();
    let chunk = 512;
    let n_chunks = mesh.triangles.len().div_ceil(chunk);
    let parts = map_range(exec, n_chunks, |c| {
        let mut trip = Vec::with_capacity(chunk * ne * ne);
        let mut load = Vec::with_capacity(chunk * ne);
        let hi = ((c + 1) * chunk).min(mesh.triangles.len());
        for t in c * chunk..hi {
            let tri = mesh.triangles[t];
            let p = tri.map(|v| mesh.vertices[v]);
            let (g, area) = barycentric_gradients(p);
            let mut k = [[0.0; 6]; 6];
            let mut f = [0.0; 6];
            for &(l, w) in &rule {
                let y = [
                    l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                    l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
                ];
                let b = op.diffusion(y);
                let d = op.effective_drift(y);
                let (phi, grad) = basis(dofs.element, l, &g);
                let wa = w * area;
                for i in 0..ne {
                    f[i] += wa * phi[i];
                    for j in 0..ne {
                        let bg = [
                            b[0][0] * grad[j][0] + b[0][1] * grad[j][1],
                            b[1][0] * grad[j][0] + b[1][1] * grad[j][1],
                        ];
                        let diff = 0.5 * (grad[i][0] * bg[0] + grad[i][1] * bg[1]);
                        let conv = (d[0] * grad[j][0] + d[1] * grad[j][1]) * phi[i];
                        k[i][j] += wa * (diff - conv);
                    }
                }
            }
            let l = &dofs.local[t];
            for i in 0..ne {
                load.push((l[i], f[i]));
                for j in 0..ne {
                    trip.push((l[i], l[j], k[i][j]));
                }
            }
        }
        (trip, load)
    });
    let mut trip = Vec::new();
    let mut load = Vec::new();
    for (t, l) in parts {
        trip.extend(t);
        load.extend(l);
    }
    (trip, load)
}

fn sparse_lu_solve(a: &Csr, rhs: &[f64]) -> Result<Vec<f64>> {
    let mut t = Vec::with_capacity(a.val.len());
    for i in 0..a.n {
        for j in a.ptr[i]..a.ptr[i + 1] {
            t.push(Triplet::new(i, a.col[j], a.val[j]));
        }
    }
    let m = SparseColMat::<usize, f64>::try_new_from_triplets(a.n, a.n, &t)
        .map_err(|_| Error::NumericalFailure { what: "sparse matrix construction", residual: f64::NAN })?;
    let lu = m.sp_lu().map_err(|_| Error::NumericalFailure { what: "sparse LU", residual: f64::NAN })?;
    let solve = |b: &[f64]| -> Vec<f64> {
        let mut x = Mat::from_fn(a.n, 1, |i, _| b[i]);
        lu.solve_in_place(x.as_mut());
        (0..a.n).map(|i| x[(i, 0)]).collect()
    };
    let mut x = solve(rhs);
    // a few rounds of iterative refinement; the system is badly scaled
    // (tau grows like exp(N A)) and a single solve loses digits
    let mut best = f64::INFINITY;
    for _ in 0..10 {
        let r: Vec<f64> = a.mul_accurate(&x).iter().zip(rhs).map(|(ax, b)| b - ax).collect();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm < 0.5 * best) {
            break;
        }
        best = norm;
        let dx = solve(&r);
        x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
    }
    Ok(x)
}

/// Value near the endemic point and how flat the surface is there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndemicQuery {
    pub value: f64,
    pub vertex: usize,
    /// Coordinates of that vertex.
    pub position: [f64; 2],
    pub distance: f64,
    /// `(max - min) / value` over vertices within two local mesh lengths.
    pub spread: f64,
    /// Inverse-distance average over the triangle containing the target.
    pub idw_value: f64,
    /// Longest edge among triangles incident to the chosen vertex.
    pub local_edge: f64,
}

impl MeshSolution {
    /// Finite-element interpolant at `p`, if `p` is inside the mesh.
    pub fn interpolate(&self, p: [f64; 2]) -> Option<f64> {
        let (t, l) = self.locate(p)?;
        let v = &self.mesh.vertices;
        let tri = self.mesh.triangles[t];
        let (g, _) = barycentric_gradients(tri.map(|i| v[i]));
        let (phi, _) = basis(self.element, l, &g);
        let loc = &self.dofs.local[t];
        Some((0..self.dofs.per_element()).map(|i| phi[i] * self.dof_values[loc[i]]).sum())
    }

    fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let v = &self.mesh.vertices;
        self.mesh.triangles.iter().enumerate().find_map(|(t, tri)| {
            let a = signed_area(v, tri);
            let l = [
                signed_area(&[p, v[tri[1]], v[tri[2]]], &[0, 1, 2]) / a,
                signed_area(&[v[tri[0]], p, v[tri[2]]], &[0, 1, 2]) / a,
                signed_area(&[v[tri[0]], v[tri[1]], p], &[0, 1, 2]) / a,
            ];
            l.iter().all(|&x| x >= -1e-12).then_some((t, l))
        })
    }

    /// Nodal value at the vertex closest to `N y*`.
    pub fn query_at_endemic(&self, params: &ModelParams) -> Result<EndemicQuery> {
        let ystar = params.endemic_state()?;
        if !(params.r0() > 1.0) {
            return Err(Error::NoEndemicEquilibrium { r0: params.r0() });
        }
        let target = [params.n() * ystar[0], params.n() * ystar[1]];
        let v = &self.mesh.vertices;
        let (vertex, distance) = v
            .iter()
            .enumerate()
            .map(|(i, &p)| (i, dist(p, target)))
            .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
        let value = self.tau[vertex];
        let local_edge = self
            .mesh
            .triangles
            .iter()
            .filter(|t| t.contains(&vertex))
            .flat_map(|t| (0..3).map(move |e| dist(v[t[e]], v[t[(e + 1) % 3]])))
            .fold(0.0, f64::max);
        let near = v.iter().zip(&self.tau).filter(|(p, _)| dist(**p, v[vertex]) <= 2.0 * local_edge);
        let (lo, hi) = near.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, &t)| (lo.min(t), hi.max(t)));
        let idw_value = match self.locate(target) {
            Some((t, _)) => {
                let tri = self.mesh.triangles[t];
                let mut num = 0.0;
                let mut den = 0.0;
                let mut exact = None;
                for &i in &tri {
                    let d = dist(v[i], target);
                    if d == 0.0 {
                        exact = Some(self.tau[i]);
                    }
                    num += self.tau[i] / d;
                    den += 1.0 / d;
                }
                exact.unwrap_or(num / den)
            }
            None => value,
        };
        Ok(EndemicQuery { value, vertex, position: v[vertex], distance, spread: (hi - lo) / value, idw_value, local_edge })
    }

    /// Plain-text dump: per triangle its three vertices as `x y tau`, the
    /// first vertex repeated, then two blank lines.
    pub fn write_triangles<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let v = &self.mesh.vertices;
        for t in &self.mesh.triangles {
            for &i in t.iter().chain(std::iter::once(&t[0])) {
                writeln!(out, "{} {} {}", v[i][0], v[i][1], self.tau[i])?;
            }
            writeln!(out)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Mean exit time of the two-stage diffusion from the mesh vertex nearest
/// `N y*`, with the default mesh.
pub fn tau_diff_fem(params: &ModelParams) -> Result<EndemicQuery> {
    let mesh = build_mesh(&Domain2D::for_params(params)?, &BoundaryDensities::default())?;
    solve_backward(params, &mesh)?.query_at_endemic(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion1d::solve_diffusion_ode;

    fn k2(beta: f64, n: u32) -> ModelParams {
        ModelParams::new(beta, 1.0, n, 2).unwrap()
    }

    #[test]
    fn mesh_covers_domain() {
        let dom = Domain2D::new(100.0, 0.5).unwrap();
        let mesh = build_mesh(&dom, &BoundaryDensities::default()).unwrap();
        assert!(mesh.triangles.iter().all(|t| signed_area(&mesh.vertices, t) > 0.0));
        assert!((mesh.area() - dom.area()).abs() < 1e-3 * dom.area());
        for i in mesh.boundary_vertices() {
            let p = mesh.vertices[i];
            assert!(mesh.segments().iter().any(|s| s.distance(p) < 1e-9), "{p:?}");
        }
    }

    #[test]
    fn rejects_thin_densities() {
        let dom = Domain2D::new(100.0, 0.5).unwrap();
        let d = BoundaryDensities { b1a: 3, ..Default::default() };
        assert!(build_mesh(&dom, &d).is_err());
        assert!(Domain2D::new(1.0, 0.5).is_err());
    }

    #[test]
    fn quadrature_integrates_quintics() {
        // int over the reference triangle of l0^2 l1^2 l2 = 2! 2! 1! 2! / 7! * area
        let exact = 2.0 * 2.0 * 2.0 / 5040.0;
        let q: f64 = quadrature().iter().map(|(l, w)| w * l[0].powi(2) * l[1].powi(2) * l[2]).sum();
        assert!((q - exact).abs() < 1e-15);
    }

    #[test]
    fn drift_correction_matches_numerical_divergence() {
        let op = TwoStageSis::new(&k2(1.7, 80)).unwrap();
        let y = [23.0, 11.5];
        let h = 1e-4;
        let mut div = [0.0; 2];
        for r in 0..2 {
            for c in 0..2 {
                let mut yp = y;
                let mut ym = y;
                yp[c] += h;
                ym[c] -= h;
                div[r] += (op.diffusion(yp)[r][c] - op.diffusion(ym)[r][c]) / (2.0 * h);
            }
        }
        let a = op.drift(y);
        let d = op.effective_drift(y);
        for r in 0..2 {
            assert!((d[r] - (a[r] - 0.5 * div[r])).abs() < 1e-8);
        }
    }

    #[test]
    fn conormal_reduces_to_printed_conditions() {
        let op = TwoStageSis::new(&k2(1.5, 100)).unwrap();
        let g = [0.37, -1.3];
        let conormal = |y: [f64; 2], n: [f64; 2]| {
            let b = op.diffusion(y);
            n[0] * (b[0][0] * g[0] + b[0][1] * g[1]) + n[1] * (b[1][0] * g[0] + b[1][1] * g[1])
        };
        // y1 = 0: proportional to d/dy1
        let y = [0.0, 40.0];
        assert!((conormal(y, [-1.0, 0.0]) + op.diffusion(y)[0][0] * g[0]).abs() < 1e-12);
        // y2 = 0: proportional to d/dy2 - d/dy1
        let y = [40.0, 0.0];
        assert!((conormal(y, [0.0, -1.0]) + 2.0 * 40.0 * (g[1] - g[0])).abs() < 1e-12);
        // y1 + y2 = N: proportional to d/dy2
        let y = [30.0, 70.0];
        assert!((conormal(y, [1.0, 1.0]) - 2.0 * 70.0 * g[1]).abs() < 1e-10);
    }

    #[test]
    fn zero_on_absorbing_corner() {
        let p = k2(1.5, 60);
        let mesh = build_mesh(&Domain2D::for_params(&p).unwrap(), &BoundaryDensities::default()).unwrap();
        let sol = solve_backward(&p, &mesh).unwrap();
        assert!(sol.relative_residual < 1e-10);
        assert!(sol.backward_error < 1e-10);
        let mut hits = 0;
        for (v, t) in mesh.vertices.iter().zip(&sol.tau) {
            if mesh.on_absorbing(*v) {
                assert_eq!(*t, 0.0);
                hits += 1;
            }
        }
        assert!(hits >= 20);
        assert!(sol.negative_overshoot.is_none());
    }

    #[test]
    fn endemic_query_geometry_and_flatness() {
        let p = k2(1.5, 100);
        let mesh = build_mesh(&Domain2D::for_params(&p).unwrap(), &BoundaryDensities::default()).unwrap();
        let sol = solve_backward(&p, &mesh).unwrap();
        let q = sol.query_at_endemic(&p).unwrap();
        assert!(q.distance <= q.local_edge);
        assert!(q.spread < 0.05, "spread {}", q.spread);
        assert!((q.idw_value - q.value).abs() < 0.01 * q.value);
        let ystar = p.endemic_state().unwrap();
        let interp = sol.interpolate([100.0 * ystar[0], 100.0 * ystar[1]]).unwrap();
        assert!((interp - q.value).abs() < 0.01 * q.value);
    }

    #[test]
    fn p1_and_p2_agree() {
        let p = k2(1.5, 60);
        let mesh = build_mesh(&Domain2D::for_params(&p).unwrap(), &BoundaryDensities::default()).unwrap();
        let q2 = solve_backward(&p, &mesh).unwrap().query_at_endemic(&p).unwrap().value;
        let cfg = FemConfig { element: Element::P1, ..Default::default() };
        let q1 = solve_backward_with(&TwoStageSis::new(&p).unwrap(), &mesh, &cfg)
            .unwrap()
            .query_at_endemic(&p)
            .unwrap()
            .value;
        assert!((q1 - q2).abs() < 0.02 * q2, "P1 {q1} P2 {q2}");
    }

    #[test]
    fn sequential_assembly_is_identical() {
        let p = k2(1.3, 40);
        let mesh = build_mesh(&Domain2D::for_params(&p).unwrap(), &BoundaryDensities::default()).unwrap();
        let op = TwoStageSis::new(&p).unwrap();
        let a = solve_backward_with(&op, &mesh, &FemConfig { exec: Execution::Sequential, ..Default::default() });
        let b = solve_backward_with(&op, &mesh, &FemConfig::default());
        assert_eq!(a.unwrap().tau, b.unwrap().tau);
    }

    /// A one-dimensional problem embedded in a thin strip.
    struct Strip {
        beta: f64,
        gamma: f64,
        n: f64,
    }

    impl BackwardOperator for Strip {
        fn diffusion(&self, y: [f64; 2]) -> [[f64; 2]; 2] {
            let b = self.beta / self.n * y[0] * (self.n - y[0]) + self.gamma * y[0];
            [[b, 0.0], [0.0, b]]
        }

        fn effective_drift(&self, y: [f64; 2]) -> [f64; 2] {
            let x = y[0];
            let a = self.beta / self.n * x * (self.n - x) - self.gamma * x;
            let db = self.beta / self.n * (self.n - 2.0 * x) + self.gamma;
            [a - 0.5 * db, 0.0]
        }
    }

    #[test]
    fn thin_strip_reduces_to_ode() {
        let (n, w) = (100.0, 2.0);
        let segs = vec![
            Segment { name: "left", start: [0.5, w], end: [0.5, 0.0], count: 4, absorbing: true },
            Segment { name: "bottom", start: [0.5, 0.0], end: [n, 0.0], count: 200, absorbing: false },
            Segment { name: "right", start: [n, 0.0], end: [n, w], count: 4, absorbing: false },
            Segment { name: "top", start: [n, w], end: [0.5, w], count: 200, absorbing: false },
        ];
        let mesh = mesh_polygon(segs).unwrap();
        let op = Strip { beta: 1.1, gamma: 1.0, n };
        let sol = solve_backward_with(&op, &mesh, &FemConfig::default()).unwrap();
        let p = ModelParams::sis(1.1, 1.0, 100).unwrap();
        let ode = solve_diffusion_ode(&p, 4000, 0.5).unwrap();
        for x in [5.0, 9.0, 50.0] {
            let fem = sol.interpolate([x, 0.5 * w]).unwrap();
            let o = ode.at(x);
            assert!((fem - o).abs() < 0.03 * o, "x={x} fem={fem} ode={o}");
        }
    }

    #[test]
    fn dump_format() {
        let p = k2(1.5, 20);
        let mesh = build_mesh(&Domain2D::for_params(&p).unwrap(), &BoundaryDensities::scaled(&Default::default(), 1))
            .unwrap();
        let sol = solve_backward(&p, &mesh).unwrap();
        let mut buf = Vec::new();
        sol.write_triangles(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let blocks: Vec<&str> = text.split("\n\n\n").filter(|b| !b.is_empty()).collect();
        assert_eq!(blocks.len(), mesh.triangles.len());
        let first: Vec<&str> = blocks[0].lines().collect();
        assert_eq!(first.len(), 4);
        assert_eq!(first[0], first[3]);
        assert_eq!(first[0].split(' ').count(), 3);
    }
}
