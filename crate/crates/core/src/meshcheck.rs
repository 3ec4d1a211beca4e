//! Topological and geometric validation: manifoldness, boundary, Euler
//! characteristic, connected components, exact self-intersection and convex
//! hull containment.

use std::collections::HashMap;

use robust::{orient2d, orient3d, Coord, Coord3D};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{cross, dot, norm, sub, TriMesh};
use crate::spatial::{Aabb, Bvh};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TopoReport {
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    pub non_manifold_edges: usize,
    pub non_manifold_vertices: usize,
    pub boundary_edges: usize,
    pub components: usize,
    pub euler: i64,
    pub self_intersecting_pairs: usize,
    /// Triangles involved in at least one intersecting pair.
    pub self_intersecting_faces: usize,
}

impl TopoReport {
    pub fn is_manifold(&self) -> bool {
        self.non_manifold_edges == 0 && self.non_manifold_vertices == 0
    }

    pub fn is_watertight(&self) -> bool {
        self.is_manifold() && self.boundary_edges == 0
    }
}

/// Undirected edge -> incident triangle ids.
pub fn edge_faces(m: &TriMesh) -> HashMap<(usize, usize), Vec<usize>> {
    let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::with_capacity(3 * m.triangles.len() / 2 + 1);
    for (t, tri) in m.triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            map.entry((a.min(b), a.max(b))).or_default().push(t);
        }
    }
    map
}

/// Combinatorial checks only (no self-intersection test).
pub fn check_combinatorics(m: &TriMesh) -> Result<TopoReport> {
    m.validate()?;
    let ef = edge_faces(m);
    let mut r = TopoReport { faces: m.triangles.len(), edges: ef.len(), ..Default::default() };
    for f in ef.values() {
        match f.len() {
            1 => r.boundary_edges += 1,
            2 => {}
            _ => r.non_manifold_edges += 1,
        }
    }

    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); m.vertices.len()];
    for (t, tri) in m.triangles.iter().enumerate() {
        for &v in tri {
            if incident[v].last() != Some(&t) {
                incident[v].push(t);
            }
        }
    }
    r.vertices = incident.iter().filter(|f| !f.is_empty()).count();
    for (v, faces) in incident.iter().enumerate() {
        if faces.len() < 2 {
            continue;
        }
        // union the star's triangles across edges through v
        let mut uf = UnionFind::new(faces.len());
        let pos: HashMap<usize, usize> = faces.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        for &t in faces {
            for &w in &m.triangles[t] {
                if w == v {
                    continue;
                }
                if let Some(fs) = ef.get(&(v.min(w), v.max(w))) {
                    for &o in fs {
                        uf.union(pos[&t], pos[&o]);
                    }
                }
            }
        }
        if uf.count() > 1 {
            r.non_manifold_vertices += 1;
        }
    }

    let mut uf = UnionFind::new(m.vertices.len());
    for tri in &m.triangles {
        uf.union(tri[0], tri[1]);
        uf.union(tri[1], tri[2]);
    }
    let mut roots: Vec<usize> =
        (0..m.vertices.len()).filter(|&v| !incident[v].is_empty()).map(|v| uf.find(v)).collect();
    roots.sort_unstable();
    roots.dedup();
    r.components = roots.len();
    r.euler = r.vertices as i64 - r.edges as i64 + r.faces as i64;
    Ok(r)
}

/// Full report including exact self-intersection counts.
pub fn check_topology(m: &TriMesh) -> Result<TopoReport> {
    let mut r = check_combinatorics(m)?;
    let pairs = self_intersections(m);
    r.self_intersecting_pairs = pairs.len();
    let mut faces: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    faces.sort_unstable();
    faces.dedup();
    r.self_intersecting_faces = faces.len();
    Ok(r)
}

/// Intersecting triangle pairs `(a, b)` with `a < b`, skipping pairs that
/// share a vertex.
pub fn self_intersections(m: &TriMesh) -> Vec<(usize, usize)> {
    let bvh = Bvh::build(m);
    let mut out = Vec::new();
    let mut cand = Vec::new();
    for (a, ta) in m.triangles.iter().enumerate() {
        let pa = m.triangle(a);
        let mut bb = Aabb::empty();
        for p in pa {
            bb.grow(p);
        }
        bvh.overlapping(&bb, &mut cand);
        cand.sort_unstable();
        for &b in &cand {
            if b <= a {
                continue;
            }
            let tb = &m.triangles[b];
            if ta.iter().any(|v| tb.contains(v)) {
                continue;
            }
            if triangles_intersect(&pa, &m.triangle(b)) {
                out.push((a, b));
            }
        }
    }
    out
}

#[inline]
fn c3(p: [f64; 3]) -> Coord3D<f64> {
    Coord3D { x: p[0], y: p[1], z: p[2] }
}

#[inline]
fn o3(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> f64 {
    orient3d(c3(a), c3(b), c3(c), c3(d))
}

#[inline]
fn sgn(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Exact triangle-triangle intersection test (touching counts).
pub fn triangles_intersect(p: &[[f64; 3]; 3], q: &[[f64; 3]; 3]) -> bool {
    let sq = [0, 1, 2].map(|i| sgn(o3(p[0], p[1], p[2], q[i])));
    if sq.iter().all(|&s| s > 0) || sq.iter().all(|&s| s < 0) {
        return false;
    }
    let sp = [0, 1, 2].map(|i| sgn(o3(q[0], q[1], q[2], p[i])));
    if sp.iter().all(|&s| s > 0) || sp.iter().all(|&s| s < 0) {
        return false;
    }
    if sq.iter().all(|&s| s == 0) {
        return coplanar_intersect(p, q);
    }
    (0..3).any(|i| segment_triangle(p[i], p[(i + 1) % 3], q)) || (0..3).any(|i| segment_triangle(q[i], q[(i + 1) % 3], p))
}

fn segment_triangle(a: [f64; 3], b: [f64; 3], t: &[[f64; 3]; 3]) -> bool {
    let sa = sgn(o3(t[0], t[1], t[2], a));
    let sb = sgn(o3(t[0], t[1], t[2], b));
    if sa == 0 && sb == 0 {
        return coplanar_segment_triangle(a, b, t);
    }
    if sa * sb > 0 {
        return false;
    }
    let s = [0, 1, 2].map(|i| sgn(o3(a, b, t[i], t[(i + 1) % 3])));
    !(s.iter().any(|&x| x > 0) && s.iter().any(|&x| x < 0))
}

/// Projection axes dropping the dominant normal component.
fn drop_axes(t: &[[f64; 3]; 3]) -> (usize, usize) {
    let n = cross(sub(t[1], t[0]), sub(t[2], t[0]));
    let a = n.map(f64::abs);
    if a[0] >= a[1] && a[0] >= a[2] {
        (1, 2)
    } else if a[1] >= a[2] {
        (2, 0)
    } else {
        (0, 1)
    }
}

#[inline]
fn o2(a: [f64; 3], b: [f64; 3], c: [f64; 3], ax: (usize, usize)) -> i8 {
    let f = |p: [f64; 3]| Coord { x: p[ax.0], y: p[ax.1] };
    sgn(orient2d(f(a), f(b), f(c)))
}

fn segments_intersect_2d(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3], ax: (usize, usize)) -> bool {
    let d1 = o2(a, b, c, ax);
    let d2 = o2(a, b, d, ax);
    let d3 = o2(c, d, a, ax);
    let d4 = o2(c, d, b, ax);
    if d1 * d2 < 0 && d3 * d4 < 0 {
        return true;
    }
    let on = |p: [f64; 3], q: [f64; 3], r: [f64; 3]| {
        (0..3).all(|k| r[k] >= p[k].min(q[k]) && r[k] <= p[k].max(q[k]))
    };
    (d1 == 0 && on(a, b, c)) || (d2 == 0 && on(a, b, d)) || (d3 == 0 && on(c, d, a)) || (d4 == 0 && on(c, d, b))
}

fn point_in_triangle_2d(p: [f64; 3], t: &[[f64; 3]; 3], ax: (usize, usize)) -> bool {
    let s = [0, 1, 2].map(|i| o2(t[i], t[(i + 1) % 3], p, ax));
    !(s.iter().any(|&x| x > 0) && s.iter().any(|&x| x < 0))
}

fn coplanar_segment_triangle(a: [f64; 3], b: [f64; 3], t: &[[f64; 3]; 3]) -> bool {
    let ax = drop_axes(t);
    point_in_triangle_2d(a, t, ax)
        || point_in_triangle_2d(b, t, ax)
        || (0..3).any(|i| segments_intersect_2d(a, b, t[i], t[(i + 1) % 3], ax))
}

fn coplanar_intersect(p: &[[f64; 3]; 3], q: &[[f64; 3]; 3]) -> bool {
    let ax = drop_axes(p);
    (0..3).any(|i| (0..3).any(|j| segments_intersect_2d(p[i], p[(i + 1) % 3], q[j], q[(j + 1) % 3], ax)))
        || point_in_triangle_2d(p[0], q, ax)
        || point_in_triangle_2d(q[0], p, ax)
}

/// Convex hull containment of `p` in the hull of 8 points. Returns whether
/// `p` is inside (allowing `1e-9` outward) and the signed distance to the
/// nearest hull facet, positive inside.
pub fn point_in_hull(p: [f64; 3], corners: &[[f64; 3]; 8]) -> Result<(bool, f64)> {
    let scale = corners.iter().flat_map(|c| c.iter()).fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let mut margin = f64::INFINITY;
    let mut facets = 0;
    for i in 0..8 {
        for j in i + 1..8 {
            for k in j + 1..8 {
                let n = cross(sub(corners[j], corners[i]), sub(corners[k], corners[i]));
                let len = norm(n);
                if len <= tol * tol {
                    continue;
                }
                let n = n.map(|x| x / len);
                let side: Vec<f64> = (0..8).map(|m| dot(n, sub(corners[m], corners[i]))).collect();
                let pos = side.iter().any(|&s| s > tol);
                let neg = side.iter().any(|&s| s < -tol);
                if pos && neg {
                    continue;
                }
                if !pos && !neg {
                    continue;
                }
                // inward normal points toward the other corners
                let sign = if pos { 1.0 } else { -1.0 };
                let d = sign * dot(n, sub(p, corners[i]));
                margin = margin.min(d);
                facets += 1;
            }
        }
    }
    if facets < 4 || !margin.is_finite() {
        return Err(Error::Degenerate("hull of the corners has no volume".into()));
    }
    Ok((margin >= -1e-9, margin))
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }

    fn count(&mut self) -> usize {
        let n = self.parent.len();
        let mut roots: Vec<usize> = (0..n).map(|x| self.find(x)).collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
    }

    #[test]
    fn tetrahedron_is_a_closed_sphere() {
        let r = check_topology(&tetra()).unwrap();
        assert_eq!(r.euler, 2);
        assert_eq!(r.boundary_edges, 0);
        assert!(r.is_watertight());
        assert_eq!(r.components, 1);
        assert_eq!(r.self_intersecting_pairs, 0);
    }

    #[test]
    fn single_triangle_has_three_boundary_edges() {
        let m = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]);
        let r = check_topology(&m).unwrap();
        assert_eq!(r.boundary_edges, 3);
        assert_eq!(r.euler, 1);
    }

    #[test]
    fn bowtie_vertex_is_non_manifold() {
        let m = TriMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
            vec![[0, 1, 2], [0, 3, 4]],
        );
        let r = check_combinatorics(&m).unwrap();
        assert_eq!(r.non_manifold_vertices, 1);
        assert_eq!(r.non_manifold_edges, 0);
    }

    #[test]
    fn fin_edge_is_non_manifold() {
        let m = TriMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]],
        );
        assert_eq!(check_combinatorics(&m).unwrap().non_manifold_edges, 1);
    }

    #[test]
    fn interpenetrating_triangles_are_counted() {
        let m = TriMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 2.0, 0.0],
                [0.5, 0.5, -1.0],
                [0.5, 0.5, 1.0],
                [3.0, 3.0, 0.5],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let r = check_topology(&m).unwrap();
        assert_eq!(r.self_intersecting_pairs, 1);
        assert_eq!(r.self_intersecting_faces, 2);
    }

    #[test]
    fn separated_and_coplanar_cases() {
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let far = [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
        assert!(!triangles_intersect(&a, &far));
        let overlap = [[0.2, 0.2, 0.0], [2.0, 0.2, 0.0], [0.2, 2.0, 0.0]];
        assert!(triangles_intersect(&a, &overlap));
        let apart = [[2.0, 2.0, 0.0], [3.0, 2.0, 0.0], [2.0, 3.0, 0.0]];
        assert!(!triangles_intersect(&a, &apart));
    }

    #[test]
    fn hull_containment() {
        let cube: [[f64; 3]; 8] = std::array::from_fn(|c| [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64]);
        let (inside, margin) = point_in_hull([0.5; 3], &cube).unwrap();
        assert!(inside);
        assert!((margin - 0.5).abs() < 1e-12);
        let (inside, _) = point_in_hull([1.0 + 1e-6, 1.0, 1.0], &cube).unwrap();
        assert!(!inside);
        let flat: [[f64; 3]; 8] = std::array::from_fn(|c| [(c & 1) as f64, ((c >> 1) & 1) as f64, 0.0]);
        assert!(point_in_hull([0.5; 3], &flat).is_err());
    }
}
