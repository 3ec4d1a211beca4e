//! Loss terms and regularizers recorded on a tape.
//!
//! Every term is returned as a list of parts `(node, coefficient)` whose
//! weighted sum is the term value. Keeping the parts separate lets finite
//! difference checks subtract them pairwise, which avoids the cancellation
//! error of differencing one large total.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::extract::{
    mc_positions_tape, place_vertices_tape, split_training_tape, training_triangles, DualVars, FieldVars, FlexParams,
    McTopology, QuadMesh, VertexField,
};
use crate::mesh::{sub, TriMesh};
use crate::meshcheck::check_combinatorics;
use crate::params::Binder;
use crate::spatial::Bvh;
use crate::target::{random_barycentric, TargetShape};
use crate::tape::{Tape, Var, Var3};

pub type Parts = Vec<(Var, f64)>;

/// Loss reported for an empty extraction; it carries no gradient.
pub const EMPTY_MESH_LOSS: f64 = 1.0e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Target-to-mesh point distance (silhouette role).
    pub surface: f64,
    /// Mesh-to-target point distance (depth role).
    pub depth: f64,
    pub sdf: f64,
    pub dev: f64,
    pub sign_start: f64,
    pub sign_end: f64,
    pub edge: f64,
    pub developable: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { surface: 1.0, depth: 10.0, sdf: 2000.0, dev: 1.0, sign_start: 0.2, sign_end: 0.01, edge: 0.0, developable: 0.0 }
    }
}

impl LossWeights {
    /// Sign weight decayed linearly from `sign_start` at iteration 0 to
    /// `sign_end` at iteration `total - 1`.
    pub fn sign_at(&self, iter: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.sign_start;
        }
        let t = (iter.min(total - 1)) as f64 / (total - 1) as f64;
        self.sign_start + (self.sign_end - self.sign_start) * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    Surface,
    Depth,
    Sdf,
    Dev,
    Sign,
    Edge,
    Developable,
}

impl Term {
    pub const ALL: [Term; 7] = [Term::Surface, Term::Depth, Term::Sdf, Term::Dev, Term::Sign, Term::Edge, Term::Developable];

    pub fn name(self) -> &'static str {
        match self {
            Term::Surface => "surface",
            Term::Depth => "depth",
            Term::Sdf => "sdf",
            Term::Dev => "dev",
            Term::Sign => "sign",
            Term::Edge => "edge",
            Term::Developable => "developable",
        }
    }
}

pub fn parts_value(tape: &Tape, parts: &[(Var, f64)]) -> f64 {
    parts.iter().map(|&(v, c)| c * tape.value(v)).sum()
}

/// Mean absolute deviation from the mean.
pub fn mad(ys: &[f64]) -> f64 {
    if ys.is_empty() {
        return 0.0;
    }
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    ys.iter().map(|y| (y - m).abs()).sum::<f64>() / ys.len() as f64
}

fn mad_var(tape: &mut Tape, ys: &[Var], fp: &mut Vec<u64>) -> Var {
    let m = tape.mean(ys);
    let devs: Vec<Var> = ys
        .iter()
        .map(|&y| {
            let d = tape.sub(y, m);
            fp.push((tape.value(d) > 0.0) as u64);
            tape.abs(d)
        })
        .collect();
    tape.mean(&devs)
}

/// Sum over dual vertices of the MAD of their distances to their crossings.
pub fn dev_parts(tape: &mut Tape, dv: &DualVars, fp: &mut Vec<u64>) -> Parts {
    let mut out = Vec::with_capacity(dv.pos.len());
    for (v, us) in dv.pos.iter().zip(&dv.crossings) {
        let ds: Vec<Var> = us.iter().map(|&u| tape.dist3(*v, u)).collect();
        out.push((mad_var(tape, &ds, fp), 1.0));
    }
    out
}

/// Lattice edges `(a, b)` whose endpoints differ in sign.
pub fn sign_change_edges<F: VertexField + ?Sized>(field: &F, edges: impl Iterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    edges
        .filter(|&(a, b)| crate::grid::is_inside(field.sdf(a)) != crate::grid::is_inside(field.sdf(b)))
        .collect()
}

/// Binary cross-entropy of `sigmoid(s_a)` against `1[s_b > 0]`, summed over
/// both orientations of every sign-change edge.
pub fn sign_parts<F: VertexField + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    field: &F,
    fv: &mut FieldVars,
    edges: &[(usize, usize)],
) -> Parts {
    let mut out = Vec::with_capacity(2 * edges.len());
    for &(a, b) in edges {
        for (x, y) in [(a, b), (b, a)] {
            let sx = fv.sdf(field, tape, binder, x);
            let target = if field.sdf(y) > 0.0 { 1.0 } else { 0.0 };
            out.push((tape.bce_with_logit(sx, target), 1.0));
        }
    }
    out
}

/// Barycentric sample layout on a mesh: `k` samples per triangle.
#[derive(Clone, Debug)]
pub struct MeshSamples {
    pub bary: Vec<Vec<[f64; 3]>>,
}

impl MeshSamples {
    /// `max(1, ceil(n / T))` uniform samples per triangle.
    pub fn draw(num_triangles: usize, n: usize, rng: &mut impl Rng) -> Self {
        let k = if num_triangles == 0 { 0 } else { n.div_ceil(num_triangles).max(1) };
        Self { bary: (0..num_triangles).map(|_| (0..k).map(|_| random_barycentric(rng)).collect()).collect() }
    }
}

/// Identifies the closest feature (vertex, edge or face) so that ties
/// between triangles sharing it do not count as a branch change.
pub fn feature_key(t: usize, tri: [usize; 3], bary: [f64; 3]) -> u64 {
    let nz: Vec<usize> = (0..3).filter(|&k| bary[k] != 0.0).map(|k| tri[k]).collect();
    match nz[..] {
        [v] => v as u64,
        [a, b] => (1 << 63) | ((a.min(b) as u64) << 31) | a.max(b) as u64,
        _ => (1 << 62) | t as u64,
    }
}

fn point_var(tape: &mut Tape, tri: [Var3; 3], b: [f64; 3]) -> Var3 {
    tape.lincomb3(&[(tri[0], b[0]), (tri[1], b[1]), (tri[2], b[2])])
}

/// Squared distance from a point on a tape to the target surface.
fn target_dist_sq(tape: &mut Tape, target: &TargetShape, p: Var3, fp: &mut Vec<u64>) -> Var {
    let x = tape.value3(p);
    if let Some(s) = &target.sdf {
        let (d, g) = s.eval_grad(x);
        tape.push(d * d, &[(p[0], 2.0 * d * g[0]), (p[1], 2.0 * d * g[1]), (p[2], 2.0 * d * g[2])])
    } else {
        let c = target.bvh.closest(x).expect("target mesh is not empty");
        fp.push(feature_key(c.triangle, target.mesh.triangles[c.triangle], c.bary));
        let r = sub(x, c.point);
        tape.push(c.dist_sq, &[(p[0], 2.0 * r[0]), (p[1], 2.0 * r[1]), (p[2], 2.0 * r[2])])
    }
}

fn tri_area_var(tape: &mut Tape, t: [Var3; 3]) -> Var {
    let e1 = tape.sub3(t[1], t[0]);
    let e2 = tape.sub3(t[2], t[0]);
    let c = tape.cross3(e1, e2);
    let n = tape.norm3(c);
    tape.scale(n, 0.5)
}

/// Area-weighted mean squared distance from the mesh to the target.
pub fn depth_parts(
    tape: &mut Tape,
    tris: &[[usize; 3]],
    pos: &[Var3],
    target: &TargetShape,
    samples: &MeshSamples,
    fp: &mut Vec<u64>,
) -> Parts {
    if tris.is_empty() {
        return vec![(tape.constant(EMPTY_MESH_LOSS), 1.0)];
    }
    let corner = |t: usize| tris[t].map(|v| pos[v]);
    let areas: Vec<Var> = (0..tris.len()).map(|t| tri_area_var(tape, corner(t))).collect();
    let total = tape.sum(&areas);
    let mut out = Vec::with_capacity(tris.len());
    for t in 0..tris.len() {
        let c = corner(t);
        let ds: Vec<Var> = samples.bary[t]
            .iter()
            .map(|&b| {
                let p = point_var(tape, c, b);
                target_dist_sq(tape, target, p, fp)
            })
            .collect();
        let m = tape.mean(&ds);
        let w = tape.mul(areas[t], m);
        out.push((tape.div(w, total), 1.0));
    }
    out
}

/// Mean squared distance from target samples to their closest mesh points.
pub fn surface_parts(
    tape: &mut Tape,
    mesh: &TriMesh,
    pos: &[Var3],
    bvh: &Bvh,
    points: &[[f64; 3]],
    fp: &mut Vec<u64>,
) -> Parts {
    if mesh.is_empty() || points.is_empty() {
        return vec![(tape.constant(EMPTY_MESH_LOSS), 1.0)];
    }
    let coef = 1.0 / points.len() as f64;
    points
        .iter()
        .map(|&q| {
            let c = bvh.closest(q).expect("mesh is not empty");
            fp.push(feature_key(c.triangle, mesh.triangles[c.triangle], c.bary));
            let t = mesh.triangles[c.triangle].map(|v| pos[v]);
            let p = point_var(tape, t, c.bary);
            let qv = tape.constant3(q);
            let d = tape.sub3(qv, p);
            (tape.norm_sq3(d), coef)
        })
        .collect()
}

/// Inside test against an extracted mesh: ray parity when it is closed,
/// winding number otherwise.
pub struct MeshSign<'a> {
    bvh: &'a Bvh,
    watertight: bool,
}

impl<'a> MeshSign<'a> {
    pub fn new(mesh: &TriMesh, bvh: &'a Bvh) -> Self {
        let watertight = check_combinatorics(mesh).map(|r| r.is_watertight()).unwrap_or(false);
        if !watertight {
            log::debug!("extracted mesh is open; signing sdf queries by winding number");
        }
        Self { bvh, watertight }
    }

    pub fn is_watertight(&self) -> bool {
        self.watertight
    }

    pub fn inside(&self, p: [f64; 3]) -> bool {
        if self.watertight {
            if let Some(b) = self.bvh.inside_by_parity(p) {
                return b;
            }
        }
        self.bvh.winding_number(p) > 0.5
    }
}

/// Mean squared difference between the extracted mesh's signed distance and
/// the target's at the query points.
pub fn sdf_parts(
    tape: &mut Tape,
    mesh: &TriMesh,
    pos: &[Var3],
    bvh: &Bvh,
    queries: &[([f64; 3], f64)],
    fp: &mut Vec<u64>,
) -> Parts {
    if mesh.is_empty() || queries.is_empty() {
        return vec![(tape.constant(EMPTY_MESH_LOSS), 1.0)];
    }
    let sign = MeshSign::new(mesh, bvh);
    let coef = 1.0 / queries.len() as f64;
    queries
        .iter()
        .map(|&(q, target)| {
            let c = bvh.closest(q).expect("mesh is not empty");
            let inside = sign.inside(q);
            fp.push(feature_key(c.triangle, mesh.triangles[c.triangle], c.bary));
            fp.push(inside as u64);
            let t = mesh.triangles[c.triangle].map(|v| pos[v]);
            let p = point_var(tape, t, c.bary);
            let qv = tape.constant3(q);
            let dist = tape.dist3(qv, p);
            let d = if inside { tape.neg(dist) } else { dist };
            let e = tape.add_const(d, -target);
            (tape.square(e), coef)
        })
        .collect()
}

/// Unique undirected edges of a triangle list, in first-seen order.
pub fn unique_edges(tris: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for t in tris {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            if seen.insert(key, out.len()).is_none() {
                out.push(key);
            }
        }
    }
    out
}

/// `(1/|T|) sum_t sum_{e in t} (|e| - mean)^2` with the mean over unique edges.
pub fn edge_parts(tape: &mut Tape, tris: &[[usize; 3]], pos: &[Var3]) -> Parts {
    if tris.is_empty() {
        return Vec::new();
    }
    let edges = unique_edges(tris);
    let index: HashMap<(usize, usize), usize> = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let lens: Vec<Var> = edges.iter().map(|&(a, b)| tape.dist3(pos[a], pos[b])).collect();
    let mean = tape.mean(&lens);
    let coef = 1.0 / tris.len() as f64;
    let mut out = Vec::with_capacity(tris.len());
    for t in tris {
        let sq: Vec<Var> = (0..3)
            .map(|k| {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let l = lens[index[&(a.min(b), a.max(b))]];
                let d = tape.sub(l, mean);
                tape.square(d)
            })
            .collect();
        out.push((tape.sum(&sq), coef));
    }
    out
}

/// Smallest eigenvalue of the area-weighted, mean-centered covariance of the
/// unit face normals around every interior vertex.
pub fn developable_parts(tape: &mut Tape, tris: &[[usize; 3]], pos: &[Var3]) -> Parts {
    let nv = pos.len();
    let mut star: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for (t, tri) in tris.iter().enumerate() {
        for &v in tri {
            star[v].push(t);
        }
    }
    let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
    for t in tris {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut interior = vec![true; nv];
    for (&(a, b), &c) in &edge_count {
        if c != 2 {
            interior[a] = false;
            interior[b] = false;
        }
    }
    let mut normals: Vec<Option<(Var3, Var)>> = vec![None; tris.len()];
    let mut out = Vec::new();
    for v in 0..nv {
        if !interior[v] || star[v].len() < 3 {
            continue;
        }
        let mut ns = Vec::with_capacity(star[v].len());
        let mut ws = Vec::with_capacity(star[v].len());
        for &t in &star[v] {
            let (n, a) = *normals[t].get_or_insert_with(|| {
                let c = tris[t].map(|i| pos[i]);
                let e1 = tape.sub3(c[1], c[0]);
                let e2 = tape.sub3(c[2], c[0]);
                let cr = tape.cross3(e1, e2);
                let len = tape.norm3(cr);
                (tape.div3(cr, len), len)
            });
            ns.push(n);
            ws.push(a);
        }
        let wsum = tape.sum(&ws);
        let w: Vec<Var> = ws.iter().map(|&a| tape.div(a, wsum)).collect();
        let mu: Var3 = [0, 1, 2].map(|k| {
            let terms: Vec<Var> = ns.iter().zip(&w).map(|(n, &wi)| tape.mul(wi, n[k])).collect();
            tape.sum(&terms)
        });
        let centered: Vec<Var3> = ns.iter().map(|&n| tape.sub3(n, mu)).collect();
        let pairs = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
        let cov: Vec<Var> = pairs
            .iter()
            .map(|&(i, j)| {
                let terms: Vec<Var> = centered
                    .iter()
                    .zip(&w)
                    .map(|(c, &wi)| {
                        let p = tape.mul(c[i], c[j]);
                        tape.mul(wi, p)
                    })
                    .collect();
                tape.sum(&terms)
            })
            .collect();
        out.push((min_eigenvalue_var(tape, &cov), 1.0));
    }
    out
}

/// Smallest eigenvalue of a symmetric 3x3 matrix given as
/// `[c00, c11, c22, c01, c02, c12]`.
pub fn min_eigenvalue_var(tape: &mut Tape, c: &[Var]) -> Var {
    let x: Vec<f64> = c.iter().map(|&v| tape.value(v)).collect();
    let m = Matrix3::new(x[0], x[3], x[4], x[3], x[1], x[5], x[4], x[5], x[2]);
    let eig = SymmetricEigen::new(m);
    let k = (0..3).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap_or(0);
    let v = eig.eigenvectors.column(k);
    let (a, b, cc) = (v[0], v[1], v[2]);
    tape.push(
        eig.eigenvalues[k],
        &[
            (c[0], a * a),
            (c[1], b * b),
            (c[2], cc * cc),
            (c[3], 2.0 * a * b),
            (c[4], 2.0 * a * cc),
            (c[5], 2.0 * b * cc),
        ],
    )
}

fn constant_positions(tape: &mut Tape, m: &TriMesh) -> Vec<Var3> {
    m.vertices.iter().map(|&p| tape.constant3(p)).collect()
}

/// [`edge_parts`] evaluated on plain positions.
pub fn reg_edge(m: &TriMesh) -> f64 {
    let mut tape = Tape::new();
    let pos = constant_positions(&mut tape, m);
    let parts = edge_parts(&mut tape, &m.triangles, &pos);
    parts_value(&tape, &parts)
}

/// [`developable_parts`] evaluated on plain positions.
pub fn reg_developable(m: &TriMesh) -> f64 {
    let mut tape = Tape::new();
    let pos = constant_positions(&mut tape, m);
    let parts = developable_parts(&mut tape, &m.triangles, &pos);
    parts_value(&tape, &parts)
}

/// Sign loss over all sign-change edges of a grid.
pub fn loss_sign(grid: &crate::grid::ScalarGrid) -> f64 {
    let edges = sign_change_edges(grid, lattice_edges(grid));
    let mut tape = Tape::new();
    let mut binder = Binder::new([grid.num_vertices(), 3 * grid.num_vertices(), 0, 0, 0]);
    let mut fv = FieldVars::new(grid.num_vertices());
    let parts = sign_parts(&mut tape, &mut binder, grid, &mut fv, &edges);
    parts_value(&tape, &parts)
}

/// All lattice edges `(lo, hi)` of a grid.
pub fn lattice_edges(grid: &crate::grid::ScalarGrid) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..grid.num_vertices()).flat_map(move |v| {
        let c = grid.vertex_coords(v);
        (0..3).filter_map(move |a| {
            if c[a] < grid.resolution[a] {
                let mut d = c;
                d[a] += 1;
                Some((v, grid.vertex_index(d)))
            } else {
                None
            }
        })
    })
}

/// Per-iteration sampling state shared by all mesh terms.
#[derive(Clone, Debug)]
pub struct ObjectiveInputs<'a> {
    pub target: &'a TargetShape,
    pub weights: &'a LossWeights,
    pub w_sign: f64,
    /// Target surface samples for the target-to-mesh term.
    pub surface_points: &'a [[f64; 3]],
    /// Query points with their target sdf values.
    pub sdf_queries: &'a [([f64; 3], f64)],
    /// Number of samples drawn on the extracted mesh.
    pub mesh_samples: usize,
    pub sample_seed: u64,
}

impl<'a> ObjectiveInputs<'a> {
    /// Draws fresh target samples and sdf queries in the cube `[-extent, extent]^3`.
    pub fn draw_samples(target: &TargetShape, n_surface: usize, n_sdf: usize, extent: f64, rng: &mut impl Rng) -> (Vec<[f64; 3]>, Vec<([f64; 3], f64)>) {
        let surface = target.sample_surface(n_surface, rng).into_iter().map(|(p, _)| p).collect();
        let queries = (0..n_sdf)
            .map(|_| {
                let q = [0; 3].map(|_| rng.random_range(-extent..extent));
                (q, target.sdf(q))
            })
            .collect();
        (surface, queries)
    }
}

/// A recorded objective: the total, its parts and the discrete decisions
/// made while recording it.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    /// Weighted parts; the total is `sum(coef * value)`.
    pub parts: Parts,
    /// Unweighted value of every active term.
    pub terms: Vec<(Term, f64)>,
    /// Changes whenever a branch taken while recording changes.
    pub fingerprint: Vec<u64>,
    /// The training mesh at the recorded positions.
    pub mesh: TriMesh,
}

impl Objective {
    pub fn term(&self, t: Term) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == t).map(|&(_, v)| v)
    }
}

/// Mesh terms shared by every extraction scheme.
pub fn mesh_terms(
    tape: &mut Tape,
    tris: &[[usize; 3]],
    pos: &[Var3],
    inputs: &ObjectiveInputs,
    fp: &mut Vec<u64>,
) -> (Vec<(Term, Parts)>, TriMesh) {
    let mesh = TriMesh::new(pos.iter().map(|&p| tape.value3(p)).collect(), tris.to_vec());
    let w = inputs.weights;
    let mut out = Vec::new();
    let bvh = Bvh::build(&mesh);
    if w.surface != 0.0 {
        out.push((Term::Surface, surface_parts(tape, &mesh, pos, &bvh, inputs.surface_points, fp)));
    }
    if w.depth != 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(inputs.sample_seed);
        let samples = MeshSamples::draw(tris.len(), inputs.mesh_samples, &mut rng);
        out.push((Term::Depth, depth_parts(tape, tris, pos, inputs.target, &samples, fp)));
    }
    if w.sdf != 0.0 {
        out.push((Term::Sdf, sdf_parts(tape, &mesh, pos, &bvh, inputs.sdf_queries, fp)));
    }
    if w.edge != 0.0 {
        out.push((Term::Edge, edge_parts(tape, tris, pos)));
    }
    if w.developable != 0.0 {
        out.push((Term::Developable, developable_parts(tape, tris, pos)));
    }
    (out, mesh)
}

fn term_weight(w: &LossWeights, w_sign: f64, t: Term) -> f64 {
    match t {
        Term::Surface => w.surface,
        Term::Depth => w.depth,
        Term::Sdf => w.sdf,
        Term::Dev => w.dev,
        Term::Sign => w_sign,
        Term::Edge => w.edge,
        Term::Developable => w.developable,
    }
}

/// Weights and sums the terms into one objective.
pub fn combine(tape: &mut Tape, terms: Vec<(Term, Parts)>, inputs: &ObjectiveInputs, fingerprint: Vec<u64>, mesh: TriMesh) -> Objective {
    let mut parts = Vec::new();
    let mut values = Vec::new();
    for (t, ps) in terms {
        let w = term_weight(inputs.weights, inputs.w_sign, t);
        values.push((t, parts_value(tape, &ps)));
        parts.extend(ps.into_iter().map(|(v, c)| (v, c * w)));
    }
    let total = tape.lincomb(&parts);
    Objective { total, parts, terms: values, fingerprint, mesh }
}

/// Divides every coefficient by the number of parts.
pub fn averaged(mut parts: Parts) -> Parts {
    let n = parts.len().max(1) as f64;
    parts.iter_mut().for_each(|p| p.1 /= n);
    parts
}

/// Records the full objective of a flexible extraction. The deviation and
/// sign terms enter as means over their parts.
pub fn flex_objective<F: VertexField + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    field: &F,
    params: &FlexParams,
    q: &QuadMesh,
    sign_edges: &[(usize, usize)],
    inputs: &ObjectiveInputs,
) -> Objective {
    let mut fp: Vec<u64> = Vec::with_capacity(4 * q.quads.len());
    fp.push(q.duals.len() as u64);
    fp.extend(q.quads.iter().flatten().map(|&k| k as u64));
    fp.extend(q.tris.iter().flatten().map(|&k| k as u64));
    let mut fv = FieldVars::new(field.num_vertices());
    let dv = place_vertices_tape(tape, binder, field, params, &q.duals, &mut fv);
    let pos = split_training_tape(tape, binder, q, params, &dv.pos);
    let tris = training_triangles(q);
    let (mut terms, mesh) = mesh_terms(tape, &tris, &pos, inputs, &mut fp);
    if inputs.weights.dev != 0.0 {
        terms.push((Term::Dev, averaged(dev_parts(tape, &dv, &mut fp))));
    }
    if inputs.w_sign != 0.0 {
        fp.extend(sign_edges.iter().flat_map(|&(a, b)| [a as u64, b as u64]));
        terms.push((Term::Sign, averaged(sign_parts(tape, binder, field, &mut fv, sign_edges))));
    }
    combine(tape, terms, inputs, fp, mesh)
}

/// Records the objective of the marching cubes baseline: the mesh terms
/// and the sign term, without the flexible deviation term.
pub fn mc_objective<F: VertexField + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    field: &F,
    topo: &McTopology,
    sign_edges: &[(usize, usize)],
    inputs: &ObjectiveInputs,
) -> Objective {
    let mut fp: Vec<u64> = topo.triangles.iter().flatten().map(|&k| k as u64).collect();
    let mut fv = FieldVars::new(field.num_vertices());
    let pos = mc_positions_tape(tape, binder, field, topo, &mut fv);
    let (mut terms, mesh) = mesh_terms(tape, &topo.triangles, &pos, inputs, &mut fp);
    if inputs.w_sign != 0.0 {
        fp.extend(sign_edges.iter().flat_map(|&(a, b)| [a as u64, b as u64]));
        terms.push((Term::Sign, averaged(sign_parts(tape, binder, field, &mut fv, sign_edges))));
    }
    combine(tape, terms, inputs, fp, mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ScalarGrid;

    #[test]
    fn mad_examples() {
        assert_eq!(mad(&[2.0, 2.0, 2.0]), 0.0);
        assert_eq!(mad(&[1.0, 3.0]), 1.0);
        let mut tape = Tape::new();
        let dv = DualVars {
            pos: vec![tape.constant3([0.0; 3])],
            crossings: vec![vec![tape.constant3([1.0, 0.0, 0.0]), tape.constant3([0.0, 3.0, 0.0])]],
        };
        let parts = dev_parts(&mut tape, &dv, &mut Vec::new());
        assert_eq!(parts_value(&tape, &parts), 1.0);
    }

    #[test]
    fn mad_is_homogeneous() {
        let ys = [0.3, 1.7, 2.2, 0.9];
        let scaled: Vec<f64> = ys.iter().map(|y| 2.5 * y).collect();
        assert!((mad(&scaled) - 2.5 * mad(&ys)).abs() < 1e-14);
    }

    #[test]
    fn sign_loss_single_edge() {
        let mut g = ScalarGrid::new([1, 1, 1], [0.0; 3], 1.0).unwrap();
        g.sdf = vec![2.0; 8];
        assert_eq!(loss_sign(&g), 0.0);
        // s = 0 counts as outside
        g.sdf[0] = 0.0;
        g.sdf[1] = -2.0;
        let edges = sign_change_edges(&g, lattice_edges(&g));
        assert_eq!(edges, vec![(0, 1), (1, 3), (1, 5)]);
        let mut tape = Tape::new();
        let mut binder = Binder::new([8, 24, 0, 0, 0]);
        let mut fv = FieldVars::new(8);
        let parts = sign_parts(&mut tape, &mut binder, &g, &mut fv, &edges);
        // H(sigmoid(0), 0) = ln 2 for the first orientation
        assert!((tape.value(parts[0].0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sign_loss_grows_with_magnitude_across_the_surface() {
        let mut prev = 0.0;
        for k in 1..6 {
            let mut g = ScalarGrid::new([1, 1, 1], [0.0; 3], 1.0).unwrap();
            g.sdf = vec![k as f64; 8];
            g.sdf[1] = -1.0;
            let l = loss_sign(&g);
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn edge_regularizer_examples() {
        // a degenerate "triangle" with lengths {1, 1, 4} is not realizable,
        // so check the formula on a flat one with lengths {1, 1, 2}
        let m = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]);
        let mean = 4.0 / 3.0;
        let expect = 2.0 * (1.0f64 - mean).powi(2) + (2.0f64 - mean).powi(2);
        assert!((reg_edge(&m) - expect).abs() < 1e-14);
        let eq = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.5, 3f64.sqrt() / 2.0, 0.0]], vec![[0, 1, 2]]);
        assert!(reg_edge(&eq) < 1e-28);
        let big = TriMesh::new(m.vertices.iter().map(|p| p.map(|x| 3.0 * x)).collect(), m.triangles.clone());
        assert!((reg_edge(&big) - 9.0 * reg_edge(&m)).abs() < 1e-12);
    }

    #[test]
    fn lambda_min_matches_closed_form() {
        let mut tape = Tape::new();
        let c: Vec<Var> = [3.0, 1.0, 2.0, 0.0, 0.0, 0.0].iter().map(|&x| tape.leaf(x)).collect();
        let l = min_eigenvalue_var(&mut tape, &c);
        assert!((tape.value(l) - 1.0).abs() < 1e-14);
        let g = tape.backward(l).unwrap();
        assert!((g.wrt(c[1]) - 1.0).abs() < 1e-14);
        assert!(g.wrt(c[0]).abs() < 1e-14);
    }

    #[test]
    fn weights_defaults_and_schedule() {
        let w = LossWeights::default();
        assert_eq!((w.surface, w.depth, w.sdf, w.dev), (1.0, 10.0, 2000.0, 1.0));
        assert_eq!(w.sign_at(0, 1000), 0.2);
        assert!((w.sign_at(999, 1000) - 0.01).abs() < 1e-15);
        assert!((w.sign_at(500, 1001) - 0.105).abs() < 1e-15);
    }
}
