//! Tetrahedral meshes of the inside volume.
//!
//! Vertices are grid vertices, dual vertices and midpoints of cells without
//! a dual vertex. Every inside lattice edge whose endpoints share a sign
//! emits one tet per pair of consecutive cells around it. Every sign-change
//! edge emits the pyramid from its inside endpoint to its surface quad,
//! split along the same diagonal as the final surface. When a cell has
//! several dual vertices, the one whose loop crosses a sign-change edge of
//! the face shared with the neighboring cell is used.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{dual_on_edge, final_split_triangles, perp_axes, FieldVars, FlexParams, QuadMesh, VertexField};
use crate::grid::{is_inside, ScalarGrid};
use crate::mesh::{cross, dot, sub, TriMesh};
use crate::params::Binder;
use crate::tables::{edge_between, DmcTables};
use crate::tape::{Tape, Var3};

/// Where a tet mesh vertex comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TetVertex {
    Grid(usize),
    Dual(usize),
    CellMid(usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TetMesh {
    pub vertices: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    pub sources: Vec<TetVertex>,
    pub volumes: Vec<f64>,
}

pub fn tet_volume(p: [[f64; 3]; 4]) -> f64 {
    dot(sub(p[1], p[0]), cross(sub(p[2], p[0]), sub(p[3], p[0]))) / 6.0
}

impl TetMesh {
    pub fn is_empty(&self) -> bool {
        self.tets.is_empty()
    }

    pub fn tet_points(&self, t: usize) -> [[f64; 3]; 4] {
        self.tets[t].map(|v| self.vertices[v])
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    fn refresh_volumes(&mut self) {
        self.volumes = (0..self.tets.len()).map(|t| tet_volume(self.tet_points(t))).collect();
    }

    /// Faces used by exactly one tet, oriented outward.
    pub fn boundary_faces(&self) -> Vec<[usize; 3]> {
        let mut count: HashMap<[usize; 3], (u32, [usize; 3])> = HashMap::new();
        for t in &self.tets {
            // outward faces of a positively oriented tet
            for f in [[t[1], t[2], t[3]], [t[0], t[3], t[2]], [t[0], t[1], t[3]], [t[0], t[2], t[1]]] {
                let mut key = f;
                key.sort_unstable();
                let e = count.entry(key).or_insert((0, f));
                e.0 += 1;
            }
        }
        let mut out: Vec<[usize; 3]> = count.into_values().filter(|(n, _)| *n == 1).map(|(_, f)| f).collect();
        out.sort_unstable();
        out
    }

    pub fn boundary_mesh(&self) -> TriMesh {
        TriMesh::new(self.vertices.clone(), self.boundary_faces())
    }

    /// ASCII `.tet`: `tet nv nt`, `v x y z` lines, `t i j k l` lines (0-based).
    pub fn to_tet_string(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "tet {} {}", self.vertices.len(), self.tets.len());
        for p in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", crate::mesh::fmt_g9(p[0]), crate::mesh::fmt_g9(p[1]), crate::mesh::fmt_g9(p[2]));
        }
        for t in &self.tets {
            let _ = writeln!(s, "t {} {} {} {}", t[0], t[1], t[2], t[3]);
        }
        s
    }

    pub fn write_tet(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_tet_string().as_bytes())?;
        Ok(())
    }

    pub fn from_tet_str(s: &str) -> Result<TetMesh> {
        let mut lines = s.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty .tet file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 || h[0] != "tet" {
            return Err(Error::Parse(format!("bad .tet header: {header}")));
        }
        let num = |x: &str| x.parse::<usize>().map_err(|e| Error::Parse(format!("{x}: {e}")));
        let (nv, nt) = (num(h[1])?, num(h[2])?);
        let mut m = TetMesh::default();
        for l in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            match (f[0], f.len()) {
                ("v", 4) => {
                    let mut p = [0.0; 3];
                    for k in 0..3 {
                        p[k] = f[k + 1].parse().map_err(|e| Error::Parse(format!("{l}: {e}")))?;
                    }
                    m.vertices.push(p);
                }
                ("t", 5) => {
                    let mut t = [0; 4];
                    for k in 0..4 {
                        t[k] = num(f[k + 1])?;
                    }
                    m.tets.push(t);
                }
                _ => return Err(Error::Parse(format!("bad .tet line: {l}"))),
            }
        }
        if m.vertices.len() != nv || m.tets.len() != nt {
            return Err(Error::Parse(format!("expected {nv} vertices and {nt} tets")));
        }
        if let Some(&i) = m.tets.iter().flatten().find(|&&i| i >= nv) {
            return Err(Error::IndexOutOfRange(format!("tet vertex {i} of {nv}")));
        }
        m.sources = (0..nv).map(TetVertex::Grid).collect();
        m.refresh_volumes();
        Ok(m)
    }

    pub fn read_tet(path: impl AsRef<Path>) -> Result<TetMesh> {
        Self::from_tet_str(&std::fs::read_to_string(path)?)
    }
}

/// The cells around a lattice edge, counter-clockwise about `+axis`;
/// `None` where the domain ends.
fn ring(grid: &ScalarGrid, p: [usize; 3], axis: usize) -> [Option<usize>; 4] {
    let (u, v) = perp_axes(axis);
    [(1usize, 1usize), (0, 1), (0, 0), (1, 0)].map(|(du, dv)| {
        if p[u] < du || p[v] < dv || p[u] - du >= grid.resolution[u] || p[v] - dv >= grid.resolution[v] {
            return None;
        }
        let mut c = p;
        c[u] -= du;
        c[v] -= dv;
        Some(grid.cell_index(c))
    })
}

struct Builder<'a> {
    grid: &'a ScalarGrid,
    q: &'a QuadMesh,
    tables: &'a DmcTables,
    index: HashMap<TetVertex, usize>,
    sources: Vec<TetVertex>,
    tets: Vec<[usize; 4]>,
}

impl Builder<'_> {
    fn vertex(&mut self, v: TetVertex) -> usize {
        let n = self.sources.len();
        *self.index.entry(v).or_insert_with(|| {
            self.sources.push(v);
            n
        })
    }

    /// Vertex of `cell` facing the face it shares with `other`.
    fn cell_vertex(&self, cell: usize, other: usize, edge: (usize, usize)) -> TetVertex {
        let st = &self.q.cells[cell];
        if st.first_dual == u32::MAX {
            return TetVertex::CellMid(cell);
        }
        let corners = self.grid.cell_corners(cell);
        let other_corners = self.grid.cell_corners(other);
        let local = |g: usize| corners.iter().position(|&c| c == g);
        let shared: Vec<usize> = (0..8).filter(|&k| other_corners.contains(&corners[k])).collect();
        let sdf = &self.grid.sdf;
        // sign-change edges of the shared face, those touching the edge first
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for (i, &a) in shared.iter().enumerate() {
            for &b in &shared[i + 1..] {
                let diff = a ^ b;
                if diff.count_ones() == 1 && is_inside(sdf[corners[a]]) != is_inside(sdf[corners[b]]) {
                    candidates.push((a, b));
                }
            }
        }
        let (ea, eb) = (local(edge.0), local(edge.1));
        candidates.sort_by_key(|&(a, b)| !(Some(a) == ea || Some(b) == ea || Some(a) == eb || Some(b) == eb));
        for (a, b) in candidates {
            if let Some(d) = dual_on_edge(self.tables, st, edge_between(a, b)) {
                return TetVertex::Dual(d);
            }
        }
        // the shared face has no crossing: use a loop crossing an edge at an endpoint
        for end in [ea, eb].into_iter().flatten() {
            for axis in 0..3 {
                let nb = end ^ (1 << axis);
                if is_inside(sdf[corners[end]]) != is_inside(sdf[corners[nb]]) {
                    if let Some(d) = dual_on_edge(self.tables, st, edge_between(end, nb)) {
                        return TetVertex::Dual(d);
                    }
                }
            }
        }
        TetVertex::Dual(st.first_dual as usize)
    }
}

/// Tet connectivity of the inside volume; positions are filled by
/// [`tet_positions`].
pub fn tet_topology(grid: &ScalarGrid, params: &FlexParams, tables: &DmcTables, q: &QuadMesh) -> Result<TetMesh> {
    if params.num_cells() != grid.num_cells() || q.cells.len() != grid.num_cells() {
        return Err(Error::InvalidGrid("tet extraction needs the surface of the same grid".into()));
    }
    let mut b = Builder { grid, q, tables, index: HashMap::new(), sources: Vec::new(), tets: Vec::new() };
    let mut quad_of_edge: HashMap<(usize, usize), usize> = HashMap::new();
    for (qi, quad) in q.quads.iter().enumerate() {
        let (d0, d2) = (&q.duals[quad[0]], &q.duals[quad[2]]);
        let edges0: Vec<(usize, usize)> = (0..d0.edges.len()).map(|k| d0.edge_vertices(k)).collect();
        let common = (0..d2.edges.len()).map(|k| d2.edge_vertices(k)).find(|e| edges0.contains(e));
        let e = common.ok_or_else(|| Error::Structure("quad without a common lattice edge".into()))?;
        quad_of_edge.insert((e.0.min(e.1), e.0.max(e.1)), qi);
    }
    for v in 0..grid.num_vertices() {
        let p = grid.vertex_coords(v);
        for axis in 0..3 {
            if p[axis] >= grid.resolution[axis] {
                continue;
            }
            let mut pw = p;
            pw[axis] += 1;
            let w = grid.vertex_index(pw);
            let (iv, iw) = (is_inside(grid.sdf[v]), is_inside(grid.sdf[w]));
            if iv && iw {
                let cells = ring(grid, p, axis);
                for k in 0..4 {
                    let (Some(c0), Some(c1)) = (cells[k], cells[(k + 1) % 4]) else { continue };
                    let x0 = b.cell_vertex(c0, c1, (v, w));
                    let x1 = b.cell_vertex(c1, c0, (v, w));
                    let t = [TetVertex::Grid(v), TetVertex::Grid(w), x0, x1].map(|x| b.vertex(x));
                    b.tets.push(t);
                }
            } else if iv != iw {
                let Some(&qi) = quad_of_edge.get(&(v.min(w), v.max(w))) else { continue };
                let quad = q.quads[qi];
                let apex = b.vertex(TetVertex::Grid(if iv { v } else { w }));
                let g = quad.map(|d| params.gamma(q.duals[d].cell));
                for tri in final_split_triangles(quad, g) {
                    let t = tri.map(|d| b.vertex(TetVertex::Dual(d)));
                    b.tets.push([apex, t[0], t[1], t[2]]);
                }
            }
        }
    }
    Ok(TetMesh { vertices: Vec::new(), tets: b.tets, sources: b.sources, volumes: Vec::new() })
}

/// Positions of every tet vertex; `dual_pos` are the surface positions.
pub fn tet_positions<F: VertexField + ?Sized>(field: &F, grid: &ScalarGrid, dual_pos: &[[f64; 3]], sources: &[TetVertex]) -> Vec<[f64; 3]> {
    sources
        .iter()
        .map(|s| match *s {
            TetVertex::Grid(v) => field.position(v),
            TetVertex::Dual(d) => dual_pos[d],
            TetVertex::CellMid(c) => {
                let ps = grid.cell_corners(c).map(|v| field.position(v));
                [0, 1, 2].map(|k| ps.iter().map(|p| p[k]).sum::<f64>() / 8.0)
            }
        })
        .collect()
}

/// Tet vertex positions recorded on a tape.
pub fn tet_positions_tape(
    tape: &mut Tape,
    binder: &mut Binder,
    grid: &ScalarGrid,
    dual_pos: &[Var3],
    sources: &[TetVertex],
    fv: &mut FieldVars,
) -> Vec<Var3> {
    sources
        .iter()
        .map(|s| match *s {
            TetVertex::Grid(v) => fv.pos(grid, tape, binder, v),
            TetVertex::Dual(d) => dual_pos[d],
            TetVertex::CellMid(c) => {
                let ps: Vec<(Var3, f64)> = grid.cell_corners(c).iter().map(|&v| (fv.pos(grid, tape, binder, v), 0.125)).collect();
                tape.lincomb3(&ps)
            }
        })
        .collect()
}

/// Orients every tet to positive signed volume.
pub fn orient_tets(m: &mut TetMesh) {
    for t in 0..m.tets.len() {
        if tet_volume(m.tet_points(t)) < 0.0 {
            m.tets[t].swap(2, 3);
        }
    }
    m.refresh_volumes();
}

/// Full tet extraction on a uniform grid with positions from `q.vertices`.
pub fn extract_tets(grid: &ScalarGrid, params: &FlexParams, tables: &DmcTables, q: &QuadMesh) -> Result<TetMesh> {
    if q.vertices.len() != q.duals.len() {
        return Err(Error::Structure("surface vertices are not placed".into()));
    }
    let mut m = tet_topology(grid, params, tables, q)?;
    m.vertices = tet_positions(grid, grid, &q.vertices, &m.sources);
    orient_tets(&mut m);
    Ok(m)
}

/// Drops tets with volume below `threshold` and unused vertices.
pub fn filter_thin_tets(m: &TetMesh, threshold: f64) -> TetMesh {
    let keep: Vec<usize> = (0..m.tets.len()).filter(|&t| !(m.volumes[t] < threshold)).collect();
    let mut remap = vec![usize::MAX; m.vertices.len()];
    let mut out = TetMesh::default();
    for &t in &keep {
        let tet = m.tets[t].map(|v| {
            if remap[v] == usize::MAX {
                remap[v] = out.vertices.len();
                out.vertices.push(m.vertices[v]);
                out.sources.push(m.sources[v]);
            }
            remap[v]
        });
        out.tets.push(tet);
        out.volumes.push(m.volumes[t]);
    }
    out
}

pub const DEFAULT_THIN_TET_VOLUME: f64 = 2e-7;

/// Comparison of the tet boundary with the surface triangles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConformityReport {
    pub boundary_faces: usize,
    pub surface_triangles: usize,
    /// Surface triangles with no matching boundary face.
    pub missing: usize,
    /// Boundary faces that are not surface triangles and do not touch the
    /// domain boundary: unfilled pockets inside the volume.
    pub defects: usize,
    pub non_positive_tets: usize,
}

/// Compares boundary faces with `surface` (triangles over dual indices) as
/// unordered vertex sets.
pub fn conformity(m: &TetMesh, grid: &ScalarGrid, surface: &[[usize; 3]]) -> ConformityReport {
    let dual_slot: HashMap<usize, usize> =
        m.sources.iter().enumerate().filter_map(|(i, s)| if let TetVertex::Dual(d) = s { Some((*d, i)) } else { None }).collect();
    let key = |mut f: [usize; 3]| {
        f.sort_unstable();
        f
    };
    let surf: std::collections::HashSet<[usize; 3]> =
        surface.iter().filter_map(|t| Some(key([*dual_slot.get(&t[0])?, *dual_slot.get(&t[1])?, *dual_slot.get(&t[2])?]))).collect();
    let missing = surface.len() - surf.len();
    let faces = m.boundary_faces();
    let fset: std::collections::HashSet<[usize; 3]> = faces.iter().map(|&f| key(f)).collect();
    let on_domain_boundary = |f: &[usize; 3]| {
        let gs: Vec<[usize; 3]> = f
            .iter()
            .filter_map(|&v| if let TetVertex::Grid(g) = m.sources[v] { Some(grid.vertex_coords(g)) } else { None })
            .collect();
        gs.iter().any(|c| (0..3).any(|a| c[a] == 0 || c[a] == grid.resolution[a]))
    };
    ConformityReport {
        boundary_faces: faces.len(),
        surface_triangles: surface.len(),
        missing: missing + surf.iter().filter(|f| !fset.contains(*f)).count(),
        defects: faces.iter().filter(|f| !surf.contains(&key(**f)) && !on_domain_boundary(f)).count(),
        non_positive_tets: m.volumes.iter().filter(|&&v| !(v > 0.0)).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{extract_quads, final_split_triangles};

    fn tables() -> DmcTables {
        DmcTables::build().unwrap()
    }

    fn tets_for(grid: &ScalarGrid) -> (TetMesh, QuadMesh, FlexParams) {
        let params = FlexParams::new(grid.num_cells());
        let t = tables();
        let q = extract_quads(grid, &params, &t).unwrap();
        (extract_tets(grid, &params, &t, &q).unwrap(), q, params)
    }

    fn final_tris(q: &QuadMesh, params: &FlexParams) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for quad in &q.quads {
            let g = quad.map(|d| params.gamma(q.duals[d].cell));
            out.extend(final_split_triangles(*quad, g));
        }
        out
    }

    /// Counts consecutive existing cell pairs around every lattice edge by
    /// direct coordinate arithmetic.
    fn brute_force_pairs(n: usize) -> usize {
        let cell_ok = |c: [i64; 3]| c.iter().all(|&x| x >= 0 && x < n as i64);
        let mut total = 0;
        for x in 0..=n as i64 {
            for y in 0..=n as i64 {
                for z in 0..=n as i64 {
                    for axis in 0..3 {
                        let p = [x, y, z];
                        if p[axis] == n as i64 {
                            continue;
                        }
                        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                        let around = [(0, 0), (-1, 0), (-1, -1), (0, -1)].map(|(du, dv)| {
                            let mut c = p;
                            c[u] += du;
                            c[v] += dv;
                            cell_ok(c)
                        });
                        total += (0..4).filter(|&k| around[k] && around[(k + 1) % 4]).count();
                    }
                }
            }
        }
        total
    }

    #[test]
    fn fully_inside_grid_matches_brute_force() {
        let mut g = ScalarGrid::unit_domain(3).unwrap();
        g.sdf.iter_mut().for_each(|s| *s = -1.0);
        let (m, _, _) = tets_for(&g);
        assert_eq!(m.tets.len(), brute_force_pairs(3));
        assert!(m.volumes.iter().all(|&v| v > 0.0));
        // the domain boundary layer is only partly covered
        assert!(m.total_volume() > 8.0 / 27.0 && m.total_volume() < 8.0);
    }

    #[test]
    fn fully_outside_grid_is_empty() {
        let g = ScalarGrid::unit_domain(3).unwrap();
        let (m, _, _) = tets_for(&g);
        assert!(m.is_empty());
    }

    #[test]
    fn single_inside_vertex_is_an_octahedron_pyramid_fan() {
        let mut g = ScalarGrid::unit_domain(2).unwrap();
        let c = g.vertex_index([1, 1, 1]);
        g.sdf[c] = -1.0;
        let (m, q, params) = tets_for(&g);
        assert_eq!(m.tets.len(), 12);
        let rep = conformity(&m, &g, &final_tris(&q, &params));
        assert_eq!((rep.missing, rep.defects, rep.non_positive_tets), (0, 0, 0), "{rep:?}");
        assert_eq!(rep.boundary_faces, 12);
    }

    #[test]
    fn sphere_conforms_to_surface() {
        let g = ScalarGrid::from_fn([16; 3], [-1.0; 3], 2.0 / 16.0, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6).unwrap();
        let (m, q, params) = tets_for(&g);
        let rep = conformity(&m, &g, &final_tris(&q, &params));
        assert_eq!((rep.missing, rep.defects, rep.non_positive_tets), (0, 0, 0), "{rep:?}");
        assert_eq!(rep.boundary_faces, rep.surface_triangles);
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.6f64.powi(3);
        assert!((m.total_volume() - exact).abs() < 0.05 * exact);
    }

    #[test]
    fn filter_thresholds() {
        let g = ScalarGrid::from_fn([6; 3], [-1.0; 3], 2.0 / 6.0, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6).unwrap();
        let (m, _, _) = tets_for(&g);
        assert_eq!(filter_thin_tets(&m, 0.0).tets.len(), m.tets.len());
        assert!(filter_thin_tets(&m, f64::INFINITY).is_empty());
        let mut flat = m.clone();
        flat.vertices.push([0.0; 3]);
        flat.vertices.push([1e-3, 0.0, 0.0]);
        flat.vertices.push([0.0, 1e-3, 0.0]);
        flat.vertices.push([0.0, 0.0, 6e-3]);
        let n = flat.vertices.len();
        flat.sources.extend((0..4).map(|k| TetVertex::Grid(usize::MAX - k)));
        flat.tets.push([n - 4, n - 3, n - 2, n - 1]);
        flat.volumes.push(tet_volume(flat.tet_points(flat.tets.len() - 1)));
        assert!((flat.volumes.last().unwrap() - 1e-9).abs() < 1e-20);
        let filtered = filter_thin_tets(&flat, DEFAULT_THIN_TET_VOLUME);
        let expect = m.volumes.iter().filter(|&&v| v >= DEFAULT_THIN_TET_VOLUME).count();
        assert_eq!(filtered.tets.len(), expect);
    }

    #[test]
    fn tet_file_round_trip() {
        let g = ScalarGrid::from_fn([4; 3], [-1.0; 3], 0.5, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6).unwrap();
        let (m, _, _) = tets_for(&g);
        let s = m.to_tet_string();
        assert!(s.starts_with(&format!("tet {} {}\n", m.vertices.len(), m.tets.len())));
        let back = TetMesh::from_tet_str(&s).unwrap();
        assert_eq!(back.tets, m.tets);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-8);
            }
        }
        assert!(TetMesh::from_tet_str("tet 1 1\nv 0 0 0\nt 0 0 0 3\n").is_err());
    }
}
