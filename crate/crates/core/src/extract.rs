//! Flexible dual marching cubes.
//!
//! Extraction runs in two steps. [`grid_topology`] looks up every cell's
//! case, resolves shared ambiguous faces and links the loops of the four
//! cells around each sign-change edge into quads. Placement then evaluates
//! the dual vertex positions either in plain floating point
//! ([`place_vertices`]) or on a [`Tape`] ([`place_vertices_tape`]) so that
//! gradients reach the sdf values, deformations and flexible weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{is_inside, ScalarGrid};
use crate::mesh::TriMesh;
use crate::params::{Binder, Group};
use crate::tables::{edge_between, DmcTables, CORNER_OFFSETS, EDGES};
use crate::tape::{Tape, Var, Var3};

/// Anything that provides per-vertex sdf values and positions.
pub trait VertexField {
    fn num_vertices(&self) -> usize;
    fn sdf(&self, v: usize) -> f64;
    fn position(&self, v: usize) -> [f64; 3];
    fn sdf_var(&self, tape: &mut Tape, binder: &mut Binder, v: usize) -> Var;
    fn position_var(&self, tape: &mut Tape, binder: &mut Binder, v: usize) -> Var3;
}

impl VertexField for ScalarGrid {
    fn num_vertices(&self) -> usize {
        ScalarGrid::num_vertices(self)
    }

    fn sdf(&self, v: usize) -> f64 {
        self.sdf[v]
    }

    fn position(&self, v: usize) -> [f64; 3] {
        self.deformed_position(v)
    }

    fn sdf_var(&self, tape: &mut Tape, binder: &mut Binder, v: usize) -> Var {
        binder.bind(tape, Group::Sdf, v, self.sdf[v])
    }

    fn position_var(&self, tape: &mut Tape, binder: &mut Binder, v: usize) -> Var3 {
        self.deformed_position_var(tape, binder, v)
    }
}

/// Raw (unconstrained) per-cell weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlexParams {
    pub alpha_raw: Vec<[f64; 8]>,
    pub beta_raw: Vec<[f64; 12]>,
    pub gamma_raw: Vec<f64>,
}

#[inline]
pub fn activate(raw: f64) -> f64 {
    raw.tanh() + 1.0
}

impl FlexParams {
    /// All raw values zero, so every activated weight is 1.
    pub fn new(num_cells: usize) -> Self {
        Self {
            alpha_raw: vec![[0.0; 8]; num_cells],
            beta_raw: vec![[0.0; 12]; num_cells],
            gamma_raw: vec![0.0; num_cells],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.gamma_raw.len()
    }

    pub fn alpha(&self, cell: usize, corner: usize) -> f64 {
        activate(self.alpha_raw[cell][corner])
    }

    pub fn beta(&self, cell: usize, edge: usize) -> f64 {
        activate(self.beta_raw[cell][edge])
    }

    pub fn gamma(&self, cell: usize) -> f64 {
        activate(self.gamma_raw[cell])
    }

    pub fn alpha_var(&self, tape: &mut Tape, binder: &mut Binder, cell: usize, corner: usize) -> Var {
        let r = binder.bind(tape, Group::Alpha, 8 * cell + corner, self.alpha_raw[cell][corner]);
        tape.tanh_plus_one(r)
    }

    pub fn beta_var(&self, tape: &mut Tape, binder: &mut Binder, cell: usize, edge: usize) -> Var {
        let r = binder.bind(tape, Group::Beta, 12 * cell + edge, self.beta_raw[cell][edge]);
        tape.tanh_plus_one(r)
    }

    pub fn gamma_var(&self, tape: &mut Tape, binder: &mut Binder, cell: usize) -> Var {
        let r = binder.bind(tape, Group::Gamma, cell, self.gamma_raw[cell]);
        tape.tanh_plus_one(r)
    }

    pub fn alpha_flat(&self) -> Vec<f64> {
        self.alpha_raw.iter().flatten().copied().collect()
    }

    pub fn beta_flat(&self) -> Vec<f64> {
        self.beta_raw.iter().flatten().copied().collect()
    }

    pub fn set_alpha_flat(&mut self, v: &[f64]) {
        for (a, c) in self.alpha_raw.iter_mut().zip(v.chunks_exact(8)) {
            a.copy_from_slice(c);
        }
    }

    pub fn set_beta_flat(&mut self, v: &[f64]) {
        for (b, c) in self.beta_raw.iter_mut().zip(v.chunks_exact(12)) {
            b.copy_from_slice(c);
        }
    }
}

/// Flexible edge crossing
/// `u = (s_i a_i x_j - s_j a_j x_i) / (s_i a_i - s_j a_j)`.
pub fn edge_crossing(xi: [f64; 3], xj: [f64; 3], si: f64, sj: f64, ai: f64, aj: f64) -> [f64; 3] {
    debug_assert!(is_inside(si) != is_inside(sj), "edge_crossing needs a sign change");
    let (wi, wj) = (si * ai, sj * aj);
    let d = wi - wj;
    [0, 1, 2].map(|k| (wi * xj[k] - wj * xi[k]) / d)
}

/// Weighted mean `sum(beta_e u_e) / sum(beta_e)`.
pub fn dual_vertex(crossings: &[[f64; 3]], betas: &[f64]) -> [f64; 3] {
    debug_assert!(!crossings.is_empty() && crossings.len() == betas.len());
    let total: f64 = betas.iter().sum();
    let mut v = [0.0; 3];
    for (u, b) in crossings.iter().zip(betas) {
        for k in 0..3 {
            v[k] += b * u[k];
        }
    }
    v.map(|x| x / total)
}

/// Tape version of [`edge_crossing`] taking the products `w = s * alpha`.
pub fn edge_crossing_var(tape: &mut Tape, xi: Var3, xj: Var3, wi: Var, wj: Var) -> Var3 {
    let (a, b) = (tape.value(wi), tape.value(wj));
    let d = a - b;
    let (pi, pj) = (tape.value3(xi), tape.value3(xj));
    [0, 1, 2].map(|k| {
        let u = (a * pj[k] - b * pi[k]) / d;
        tape.push(
            u,
            &[(wi, (pj[k] - u) / d), (wj, (u - pi[k]) / d), (xj[k], a / d), (xi[k], -b / d)],
        )
    })
}

/// Tape version of [`dual_vertex`].
pub fn dual_vertex_var(tape: &mut Tape, crossings: &[Var3], betas: &[Var]) -> Var3 {
    let bv: Vec<f64> = betas.iter().map(|&b| tape.value(b)).collect();
    let total: f64 = bv.iter().sum();
    let uv: Vec<[f64; 3]> = crossings.iter().map(|&u| tape.value3(u)).collect();
    let v = dual_vertex(&uv, &bv);
    let mut links = Vec::with_capacity(2 * crossings.len());
    [0, 1, 2].map(|k| {
        links.clear();
        for (e, (&u, &b)) in crossings.iter().zip(betas).enumerate() {
            links.push((u[k], bv[e] / total));
            links.push((b, (uv[e][k] - v[k]) / total));
        }
        tape.push(v[k], &links)
    })
}

/// One dual vertex: the loop `lp` of cell `cell`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualVertex {
    pub cell: usize,
    pub lp: u8,
    /// Field vertex ids of the cell's corners in cube corner order.
    pub corners: [usize; 8],
    /// Cut edges of the loop in traversal order.
    pub edges: Vec<u8>,
}

impl DualVertex {
    /// Field vertex ids `(i, j)` of the `k`-th crossing's edge.
    pub fn edge_vertices(&self, k: usize) -> (usize, usize) {
        let (a, b) = EDGES[self.edges[k] as usize];
        (self.corners[a], self.corners[b])
    }
}

/// Per-cell extraction state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct CellState {
    pub config: u8,
    pub parity: u8,
    pub flips: u8,
    /// Index of the cell's first dual vertex, `u32::MAX` when it has none.
    pub first_dual: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuadMesh {
    pub vertices: Vec<[f64; 3]>,
    pub duals: Vec<DualVertex>,
    /// Corners in cyclic order; the normal points from inside to outside.
    pub quads: Vec<[usize; 4]>,
    /// Polygons that collapsed to triangles (adaptive grids only).
    pub tris: Vec<[usize; 3]>,
    pub cells: Vec<CellState>,
}

impl QuadMesh {
    pub fn num_faces(&self) -> usize {
        self.quads.len() + self.tris.len()
    }

    /// Polygon soup export; quads stay quads.
    pub fn to_obj(&self) -> String {
        crate::mesh::write_obj_string(
            &self.vertices,
            self.quads.iter().map(|q| &q[..]).chain(self.tris.iter().map(|t| &t[..])),
        )
    }

    /// Triangles only, each quad fanned from its first corner. Used for
    /// topology checks of the quad surface itself.
    pub fn fan_triangles(&self) -> TriMesh {
        let mut tris: Vec<[usize; 3]> = Vec::with_capacity(2 * self.quads.len() + self.tris.len());
        for q in &self.quads {
            tris.push([q[0], q[1], q[2]]);
            tris.push([q[0], q[2], q[3]]);
        }
        tris.extend_from_slice(&self.tris);
        TriMesh::new(self.vertices.clone(), tris)
    }

    fn gamma_of(&self, params: &FlexParams, v: usize) -> f64 {
        params.gamma(self.duals[v].cell)
    }
}

#[inline]
pub fn cell_parity(c: [usize; 3]) -> u8 {
    ((c[0] + c[1] + c[2]) % 2) as u8
}

/// Sign configurations of all cells.
pub fn cell_configs(grid: &ScalarGrid) -> Vec<u8> {
    (0..grid.num_cells())
        .map(|c| {
            let corners = grid.cell_corners(c);
            let mut m = 0u8;
            for (k, &v) in corners.iter().enumerate() {
                if is_inside(grid.sdf[v]) {
                    m |= 1 << k;
                }
            }
            m
        })
        .collect()
}

/// Flips the resolution of every shared ambiguous face on which the loops
/// of both adjacent cells cross twice.
fn resolve_problem_faces(grid: &ScalarGrid, tables: &DmcTables, cells: &mut [CellState]) {
    for _ in 0..8 {
        let mut changed = false;
        for c in 0..cells.len() {
            let cc = grid.cell_coords(c);
            for axis in 0..3 {
                let mut d = [0i64; 3];
                d[axis] = 1;
                let Some(n) = grid.cell_offset(cc, d) else { continue };
                let (fc, fn_) = (2 * axis + 1, 2 * axis);
                let a = tables.case(cells[c].config, cells[c].parity as usize, cells[c].flips);
                let b = tables.case(cells[n].config, cells[n].parity as usize, cells[n].flips);
                if (a.problem_faces >> fc) & 1 == 1 && (b.problem_faces >> fn_) & 1 == 1 {
                    cells[c].flips ^= 1 << fc;
                    cells[n].flips ^= 1 << fn_;
                    changed = true;
                }
            }
        }
        if !changed {
            return;
        }
    }
    log::warn!("problem face resolution did not settle");
}

/// Axes perpendicular to `a`, ordered so that `u x v = a`.
#[inline]
pub fn perp_axes(a: usize) -> (usize, usize) {
    match a {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    }
}

/// The four cells around the lattice edge starting at vertex `p` along
/// `axis`, counter-clockwise about `+axis`, as `(cell index, local edge)`.
/// `None` if the edge is on the domain boundary.
pub fn cells_around_edge(grid: &ScalarGrid, p: [usize; 3], axis: usize) -> Option<[(usize, usize); 4]> {
    let (u, v) = perp_axes(axis);
    if p[axis] >= grid.resolution[axis] {
        return None;
    }
    let quadrants = [(1usize, 1usize), (0, 1), (0, 0), (1, 0)];
    let mut out = [(0, 0); 4];
    for (k, &(du, dv)) in quadrants.iter().enumerate() {
        if p[u] < du || p[v] < dv || p[u] - du >= grid.resolution[u] || p[v] - dv >= grid.resolution[v] {
            return None;
        }
        let mut c = p;
        c[u] -= du;
        c[v] -= dv;
        let lo = (du << u) | (dv << v);
        out[k] = (grid.cell_index(c), edge_between(lo, lo | (1 << axis)));
    }
    Some(out)
}

/// Index of the dual vertex whose loop crosses local edge `e` of a cell.
pub fn dual_on_edge(tables: &DmcTables, st: &CellState, e: usize) -> Option<usize> {
    let case = tables.case(st.config, st.parity as usize, st.flips);
    let l = case.edge_loop[e];
    (l != u8::MAX && st.first_dual != u32::MAX).then(|| st.first_dual as usize + l as usize)
}

/// Cases, dual vertices and quads of a uniform grid. Vertex positions are
/// left empty.
pub fn grid_topology(grid: &ScalarGrid, tables: &DmcTables) -> Result<QuadMesh> {
    grid.validate()?;
    let configs = cell_configs(grid);
    let mut cells: Vec<CellState> = configs
        .iter()
        .enumerate()
        .map(|(c, &config)| CellState { config, parity: cell_parity(grid.cell_coords(c)), flips: 0, first_dual: u32::MAX })
        .collect();
    resolve_problem_faces(grid, tables, &mut cells);

    let mut duals = Vec::new();
    for (c, st) in cells.iter_mut().enumerate() {
        let case = tables.case(st.config, st.parity as usize, st.flips);
        if case.loops.is_empty() {
            continue;
        }
        st.first_dual = duals.len() as u32;
        let corners = grid.cell_corners(c);
        for (l, lp) in case.loops.iter().enumerate() {
            duals.push(DualVertex { cell: c, lp: l as u8, corners, edges: lp.clone() });
        }
    }

    let mut quads = Vec::new();
    for vi in 0..grid.num_vertices() {
        let p = grid.vertex_coords(vi);
        let inside = is_inside(grid.sdf[vi]);
        for axis in 0..3 {
            if p[axis] >= grid.resolution[axis] {
                continue;
            }
            let mut q = p;
            q[axis] += 1;
            let wi = grid.vertex_index(q);
            if inside == is_inside(grid.sdf[wi]) {
                continue;
            }
            let Some(ring) = cells_around_edge(grid, p, axis) else { continue };
            let mut quad = [0usize; 4];
            for (k, &(cell, e)) in ring.iter().enumerate() {
                quad[k] = dual_on_edge(tables, &cells[cell], e)
                    .ok_or_else(|| Error::Table(format!("edge {e} of cell {cell} is not in a loop")))?;
            }
            if !inside {
                quad.reverse();
            }
            quads.push(quad);
        }
    }
    Ok(QuadMesh { vertices: Vec::new(), duals, quads, tris: Vec::new(), cells })
}

/// Plain-float dual vertex positions.
pub fn place_vertices<F: VertexField + ?Sized>(field: &F, params: &FlexParams, duals: &[DualVertex]) -> Vec<[f64; 3]> {
    let mut us = Vec::with_capacity(8);
    let mut bs = Vec::with_capacity(8);
    duals
        .iter()
        .map(|d| {
            us.clear();
            bs.clear();
            for &e in &d.edges {
                let (a, b) = EDGES[e as usize];
                let (va, vb) = (d.corners[a], d.corners[b]);
                us.push(edge_crossing(
                    field.position(va),
                    field.position(vb),
                    field.sdf(va),
                    field.sdf(vb),
                    params.alpha(d.cell, a),
                    params.alpha(d.cell, b),
                ));
                bs.push(params.beta(d.cell, e as usize));
            }
            dual_vertex(&us, &bs)
        })
        .collect()
}

/// Dual vertex positions and their crossings on a tape.
#[derive(Clone, Debug, Default)]
pub struct DualVars {
    pub pos: Vec<Var3>,
    pub crossings: Vec<Vec<Var3>>,
}

/// Memoizes per-vertex sdf and position nodes of a field.
pub struct FieldVars {
    sdf: Vec<Option<Var>>,
    pos: Vec<Option<Var3>>,
}

impl FieldVars {
    pub fn new(n: usize) -> Self {
        Self { sdf: vec![None; n], pos: vec![None; n] }
    }

    pub fn sdf<F: VertexField + ?Sized>(&mut self, f: &F, tape: &mut Tape, binder: &mut Binder, v: usize) -> Var {
        if let Some(x) = self.sdf[v] {
            return x;
        }
        let x = f.sdf_var(tape, binder, v);
        self.sdf[v] = Some(x);
        x
    }

    pub fn pos<F: VertexField + ?Sized>(&mut self, f: &F, tape: &mut Tape, binder: &mut Binder, v: usize) -> Var3 {
        if let Some(x) = self.pos[v] {
            return x;
        }
        let x = f.position_var(tape, binder, v);
        self.pos[v] = Some(x);
        x
    }
}

pub fn place_vertices_tape<F: VertexField + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    field: &F,
    params: &FlexParams,
    duals: &[DualVertex],
    fv: &mut FieldVars,
) -> DualVars {
    let mut out = DualVars { pos: Vec::with_capacity(duals.len()), crossings: Vec::with_capacity(duals.len()) };
    let mut cur_cell = usize::MAX;
    let mut w: [Option<Var>; 8] = [None; 8];
    for d in duals {
        if d.cell != cur_cell {
            cur_cell = d.cell;
            w = [None; 8];
        }
        let mut us = Vec::with_capacity(d.edges.len());
        let mut bs = Vec::with_capacity(d.edges.len());
        for &e in &d.edges {
            let (a, b) = EDGES[e as usize];
            for c in [a, b] {
                if w[c].is_none() {
                    let s = fv.sdf(field, tape, binder, d.corners[c]);
                    let al = params.alpha_var(tape, binder, d.cell, c);
                    w[c] = Some(tape.mul(s, al));
                }
            }
            let xa = fv.pos(field, tape, binder, d.corners[a]);
            let xb = fv.pos(field, tape, binder, d.corners[b]);
            us.push(edge_crossing_var(tape, xa, xb, w[a].unwrap(), w[b].unwrap()));
            bs.push(params.beta_var(tape, binder, d.cell, e as usize));
        }
        out.pos.push(dual_vertex_var(tape, &us, &bs));
        out.crossings.push(us);
    }
    out
}

/// Full extraction on a uniform grid.
pub fn extract_quads(grid: &ScalarGrid, params: &FlexParams, tables: &DmcTables) -> Result<QuadMesh> {
    if params.num_cells() != grid.num_cells() {
        return Err(Error::InvalidGrid(format!(
            "{} cells but parameters for {}",
            grid.num_cells(),
            params.num_cells()
        )));
    }
    let mut q = grid_topology(grid, tables)?;
    q.vertices = place_vertices(grid, params, &q.duals);
    Ok(q)
}

/// Midpoint weight of the training split:
/// `[g13 (v1+v3)/2 + g24 (v2+v4)/2] / (g13 + g24)`.
pub fn split_midpoint(v: [[f64; 3]; 4], g: [f64; 4]) -> [f64; 3] {
    let (a, b) = (g[0] * g[2], g[1] * g[3]);
    [0, 1, 2].map(|k| (a * 0.5 * (v[0][k] + v[2][k]) + b * 0.5 * (v[1][k] + v[3][k])) / (a + b))
}

/// True when the quad is split along its (1,3) diagonal.
#[inline]
pub fn use_first_diagonal(g: [f64; 4]) -> bool {
    g[0] * g[2] >= g[1] * g[3]
}

/// Four triangles per quad around a weighted midpoint. Midpoints follow the
/// dual vertices, one per quad in quad order.
pub fn split_training(q: &QuadMesh, params: &FlexParams) -> TriMesh {
    let nd = q.vertices.len();
    let mut vertices = q.vertices.clone();
    let mut midpoint = vec![false; nd];
    let mut triangles = Vec::with_capacity(4 * q.quads.len() + q.tris.len());
    for (i, quad) in q.quads.iter().enumerate() {
        let v = quad.map(|k| q.vertices[k]);
        let g = quad.map(|k| q.gamma_of(params, k));
        vertices.push(split_midpoint(v, g));
        midpoint.push(true);
        let m = nd + i;
        for k in 0..4 {
            triangles.push([quad[k], quad[(k + 1) % 4], m]);
        }
    }
    triangles.extend_from_slice(&q.tris);
    TriMesh { vertices, triangles, midpoint }
}

/// Triangle indices of [`split_training`] without placing any vertex.
pub fn training_triangles(q: &QuadMesh) -> Vec<[usize; 3]> {
    let nd = q.duals.len();
    let mut out = Vec::with_capacity(4 * q.quads.len() + q.tris.len());
    for (i, quad) in q.quads.iter().enumerate() {
        for k in 0..4 {
            out.push([quad[k], quad[(k + 1) % 4], nd + i]);
        }
    }
    out.extend_from_slice(&q.tris);
    out
}

/// Vertex positions of [`split_training`] on a tape.
pub fn split_training_tape(
    tape: &mut Tape,
    binder: &mut Binder,
    q: &QuadMesh,
    params: &FlexParams,
    pos: &[Var3],
) -> Vec<Var3> {
    let mut out = pos.to_vec();
    let mut gamma: Vec<Option<Var>> = vec![None; params.num_cells()];
    for quad in &q.quads {
        let g = quad.map(|k| {
            let c = q.duals[k].cell;
            *gamma[c].get_or_insert_with(|| params.gamma_var(tape, binder, c))
        });
        let a = tape.mul(g[0], g[2]);
        let b = tape.mul(g[1], g[3]);
        let (av, bv) = (tape.value(a), tape.value(b));
        let tot = av + bv;
        let v = quad.map(|k| tape.value3(pos[k]));
        let p = quad.map(|k| pos[k]);
        out.push([0, 1, 2].map(|k| {
            let d13 = 0.5 * (v[0][k] + v[2][k]);
            let d24 = 0.5 * (v[1][k] + v[3][k]);
            let m = (av * d13 + bv * d24) / tot;
            tape.push(
                m,
                &[
                    (p[0][k], 0.5 * av / tot),
                    (p[2][k], 0.5 * av / tot),
                    (p[1][k], 0.5 * bv / tot),
                    (p[3][k], 0.5 * bv / tot),
                    (a, (d13 - m) / tot),
                    (b, (d24 - m) / tot),
                ],
            )
        }));
    }
    out
}

/// Two triangles per quad along the diagonal with the larger gamma product;
/// ties go to the (1,3) diagonal.
pub fn split_final(q: &QuadMesh, params: &FlexParams) -> TriMesh {
    let mut triangles = Vec::with_capacity(2 * q.quads.len() + q.tris.len());
    for quad in &q.quads {
        let g = quad.map(|k| q.gamma_of(params, k));
        triangles.extend(final_split_triangles(*quad, g));
    }
    triangles.extend_from_slice(&q.tris);
    TriMesh::new(q.vertices.clone(), triangles)
}

pub fn final_split_triangles(q: [usize; 4], g: [f64; 4]) -> [[usize; 3]; 2] {
    if use_first_diagonal(g) {
        [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    } else {
        [[q[0], q[1], q[3]], [q[1], q[2], q[3]]]
    }
}

/// Marching cubes baseline: one vertex per sign-change lattice edge,
/// each loop fanned into triangles.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct McTopology {
    /// Field vertex pairs of the crossing edges.
    pub edges: Vec<(usize, usize)>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn mc_topology(grid: &ScalarGrid, tables: &DmcTables) -> Result<McTopology> {
    let q = grid_topology(grid, tables)?;
    let mut slot = vec![u32::MAX; 3 * grid.num_vertices()];
    let mut topo = McTopology::default();
    for d in &q.duals {
        let ids: Vec<usize> = (0..d.edges.len())
            .map(|k| {
                let (a, b) = d.edge_vertices(k);
                let axis = crate::tables::edge_axis(d.edges[k] as usize);
                let key = 3 * a + axis;
                if slot[key] == u32::MAX {
                    slot[key] = topo.edges.len() as u32;
                    topo.edges.push((a, b));
                }
                slot[key] as usize
            })
            .collect();
        for k in 1..ids.len() - 1 {
            topo.triangles.push([ids[0], ids[k], ids[k + 1]]);
        }
    }
    Ok(topo)
}

pub fn mc_positions<F: VertexField + ?Sized>(field: &F, topo: &McTopology) -> Vec<[f64; 3]> {
    topo.edges
        .iter()
        .map(|&(a, b)| edge_crossing(field.position(a), field.position(b), field.sdf(a), field.sdf(b), 1.0, 1.0))
        .collect()
}

pub fn mc_positions_tape<F: VertexField + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    field: &F,
    topo: &McTopology,
    fv: &mut FieldVars,
) -> Vec<Var3> {
    topo.edges
        .iter()
        .map(|&(a, b)| {
            let (sa, sb) = (fv.sdf(field, tape, binder, a), fv.sdf(field, tape, binder, b));
            let (xa, xb) = (fv.pos(field, tape, binder, a), fv.pos(field, tape, binder, b));
            edge_crossing_var(tape, xa, xb, sa, sb)
        })
        .collect()
}

pub fn extract_mc_baseline(grid: &ScalarGrid, tables: &DmcTables) -> Result<TriMesh> {
    let topo = mc_topology(grid, tables)?;
    Ok(TriMesh::new(mc_positions(grid, &topo), topo.triangles))
}

/// Positions of the lattice corners of a cell, deformed.
pub fn deformed_cell_corners<F: VertexField + ?Sized>(field: &F, corners: &[usize; 8]) -> [[f64; 3]; 8] {
    corners.map(|v| field.position(v))
}

/// Undeformed unit cube corners, handy for tests.
pub fn unit_cube_corners() -> [[f64; 3]; 8] {
    CORNER_OFFSETS.map(|o| o.map(|x| x as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshcheck::check_combinatorics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tables() -> DmcTables {
        DmcTables::build().unwrap()
    }

    fn sphere(res: usize, r: f64) -> ScalarGrid {
        ScalarGrid::from_fn([res; 3], [-1.0; 3], 2.0 / res as f64, |p| {
            (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r
        })
        .unwrap()
    }

    #[test]
    fn crossing_examples() {
        let (a, b) = ([0.0; 3], [1.0, 0.0, 0.0]);
        assert_eq!(edge_crossing(a, b, -1.0, 1.0, 1.0, 1.0), [0.5, 0.0, 0.0]);
        assert_eq!(edge_crossing(a, b, -1.0, 3.0, 1.0, 1.0), [0.25, 0.0, 0.0]);
        let u = edge_crossing(a, b, -1.0, 1.0, 2.0, 0.5);
        assert!((u[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dual_vertex_examples() {
        let u = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(dual_vertex(&u, &[2.0, 1.0, 1.0]), [0.25, 0.25, 0.0]);
        let c = dual_vertex(&u, &[1.0; 3]);
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-15 && (c[1] - 1.0 / 3.0).abs() < 1e-15);
        let d = dual_vertex(&u, &[1e-12, 1.0, 1e-12]);
        assert!((d[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn split_examples() {
        let sq = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(split_midpoint(sq, [1.0; 4]), [0.5, 0.5, 0.0]);
        let bent = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]];
        assert_eq!(split_midpoint(bent, [1.0; 4]), [0.5, 0.5, 0.25]);
        assert_eq!(split_midpoint(bent, [3.0, 1.0, 1.0, 1.0]), [0.5, 0.5, 0.375]);
        assert!(use_first_diagonal([2.0, 1.0, 2.0, 1.0]));
        assert!(use_first_diagonal([1.0; 4]));
        assert!(!use_first_diagonal([1.0, 2.0, 1.0, 2.0]));
    }

    #[test]
    fn all_positive_is_empty() {
        let g = ScalarGrid::unit_domain(4).unwrap();
        let q = extract_quads(&g, &FlexParams::new(g.num_cells()), &tables()).unwrap();
        assert!(q.duals.is_empty() && q.quads.is_empty());
        assert!(extract_mc_baseline(&g, &tables()).unwrap().is_empty());
    }

    #[test]
    fn single_inside_vertex_gives_a_closed_octahedron_dual() {
        let mut g = ScalarGrid::new([2; 3], [0.0; 3], 1.0).unwrap();
        let c = g.vertex_index([1, 1, 1]);
        g.sdf[c] = -1.0;
        let q = extract_quads(&g, &FlexParams::new(g.num_cells()), &tables()).unwrap();
        // 8 cells each with a triangle loop, 6 edges around the vertex
        assert_eq!(q.duals.len(), 8);
        assert_eq!(q.quads.len(), 6);
        assert!(q.duals.iter().all(|d| d.edges.len() == 3));
        let r = check_combinatorics(&q.fan_triangles()).unwrap();
        assert!(r.is_watertight());
        assert_eq!(r.euler, 2);
        // normals point away from the inside vertex
        let m = split_final(&q, &FlexParams::new(g.num_cells()));
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn sphere_is_closed_genus_zero() {
        let g = sphere(16, 0.6);
        let p = FlexParams::new(g.num_cells());
        let q = extract_quads(&g, &p, &tables()).unwrap();
        let r = check_combinatorics(&q.fan_triangles()).unwrap();
        assert!(r.is_watertight(), "{r:?}");
        assert_eq!(r.euler, 2);
        let tri = split_final(&q, &p);
        assert_eq!(tri.triangles.len(), 2 * q.quads.len());
        let vol = tri.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.216;
        assert!((vol - exact).abs() / exact < 0.05, "{vol} vs {exact}");
        let tr = split_training(&q, &p);
        assert_eq!(tr.triangles.len(), 4 * q.quads.len());
        assert!(check_combinatorics(&tr).unwrap().is_watertight());
    }

    #[test]
    fn mc_sphere_and_half_space() {
        let m = extract_mc_baseline(&sphere(16, 0.6), &tables()).unwrap();
        let r = check_combinatorics(&m).unwrap();
        assert!(r.is_watertight());
        assert_eq!(r.euler, 2);
        assert!(m.signed_volume() > 0.0);
        let g = ScalarGrid::from_fn([4; 3], [0.0; 3], 0.25, |p| p[0] - 0.5).unwrap();
        let m = extract_mc_baseline(&g, &tables()).unwrap();
        assert!(!m.is_empty());
        assert!(m.vertices.iter().all(|v| (v[0] - 0.5).abs() < 1e-12));
    }

    #[test]
    fn default_weights_give_loop_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = ScalarGrid::new([4; 3], [0.0; 3], 1.0).unwrap();
        for s in g.sdf.iter_mut() {
            *s = rng.random_range(-1.0..1.0);
        }
        let q = extract_quads(&g, &FlexParams::new(g.num_cells()), &tables()).unwrap();
        for (d, v) in q.duals.iter().zip(&q.vertices) {
            let mut c = [0.0; 3];
            for k in 0..d.edges.len() {
                let (a, b) = d.edge_vertices(k);
                let (sa, sb) = (g.sdf[a], g.sdf[b]);
                let (xa, xb) = (g.lattice_position(a), g.lattice_position(b));
                for j in 0..3 {
                    c[j] += (xa[j] * sb - xb[j] * sa) / (sb - sa) / d.edges.len() as f64;
                }
            }
            for j in 0..3 {
                assert!((c[j] - v[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_signs_give_manifold_quads() {
        let t = tables();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut g = ScalarGrid::new([5; 3], [0.0; 3], 1.0).unwrap();
            for v in 0..g.num_vertices() {
                let c = g.vertex_coords(v);
                let border = c.iter().any(|&x| x == 0 || x == 5);
                g.sdf[v] = if !border && rng.random_bool(0.5) { -1.0 } else { 1.0 };
            }
            let q = grid_topology(&g, &t).unwrap();
            let mut m = q.fan_triangles();
            m.vertices = vec![[0.0; 3]; q.duals.len()];
            let r = check_combinatorics(&m).unwrap();
            assert_eq!(r.non_manifold_edges, 0);
            assert_eq!(r.non_manifold_vertices, 0);
        }
    }

    #[test]
    fn tape_placement_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = sphere(6, 0.55);
        for d in g.deform_raw.iter_mut() {
            *d = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        }
        let mut p = FlexParams::new(g.num_cells());
        for c in 0..g.num_cells() {
            p.alpha_raw[c] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            p.beta_raw[c] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            p.gamma_raw[c] = rng.random_range(-1.0..1.0);
        }
        let q = extract_quads(&g, &p, &tables()).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new([g.num_vertices(), 3 * g.num_vertices(), 8 * g.num_cells(), 12 * g.num_cells(), g.num_cells()]);
        let mut fv = FieldVars::new(g.num_vertices());
        let dv = place_vertices_tape(&mut tape, &mut binder, &g, &p, &q.duals, &mut fv);
        for (a, b) in dv.pos.iter().zip(&q.vertices) {
            assert_eq!(tape.value3(*a), *b);
        }
        let tv = split_training_tape(&mut tape, &mut binder, &q, &p, &dv.pos);
        let tm = split_training(&q, &p);
        for (a, b) in tv.iter().zip(&tm.vertices) {
            let x = tape.value3(*a);
            assert!((0..3).all(|k| (x[k] - b[k]).abs() < 1e-15));
        }
    }
}
