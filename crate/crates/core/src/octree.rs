//! Adaptive octree lattice.
//!
//! Leaves are axis-aligned cubes addressed on the finest lattice: a leaf at
//! `level` has edge length `2^(max_depth - level)` finest units and its
//! minimum corner at `coord`. Vertices are the union of all leaf corners.
//!
//! A vertex that lies on the face of a larger leaf without being one of its
//! corners is a hanging vertex. Its value is tied to the bilinear
//! interpolation of that face so that both sides see the same zero set;
//! [`Octree::constrain_sdf`] projects the stored values and the
//! [`VertexField`] implementation expresses them on the tape as a linear
//! combination of free values. Hanging vertices do not move.
//!
//! Extraction walks the minimal edges (leaf edges that contain no finer leaf
//! edge). The leaves around a minimal edge either have it on one of their
//! edges or, for a coarse leaf next to finer ones, in the interior of one of
//! their faces. Such a leaf occupies two of the four quadrants, and the
//! polygon collapses to a triangle.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{dual_on_edge, place_vertices, perp_axes, CellState, DualVertex, FlexParams, QuadMesh, VertexField};
use crate::grid::{bounded_offset, is_inside, ScalarGrid};
use crate::params::{Binder, Group};
use crate::tables::{edge_between, face_axes, face_corners, face_edges, DmcTables, CORNER_OFFSETS};
use crate::tape::{Tape, Var, Var3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Leaf {
    pub level: u8,
    /// Minimum corner on the finest lattice.
    pub coord: [u32; 3],
}

/// Bilinear tie of a hanging vertex to the four corners of a coarse face,
/// in [`face_corners`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceConstraint {
    pub face: [usize; 4],
    pub weights: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctreeSnapshot {
    pub base: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
    pub max_depth: u8,
    pub leaves: Vec<Leaf>,
    pub vertices: Vec<[u32; 3]>,
    pub sdf: Vec<f64>,
    pub deform_raw: Vec<[f64; 3]>,
    pub enforce_constraints: bool,
}

#[derive(Clone, Debug)]
pub struct Octree {
    /// Number of level-0 cells per axis.
    pub base: [usize; 3],
    pub origin: [f64; 3],
    /// Edge length of a level-0 cell.
    pub spacing: f64,
    pub max_depth: u8,
    pub leaves: Vec<Leaf>,
    /// Finest-lattice coordinates, sorted by `(z, y, x)`.
    pub vertices: Vec<[u32; 3]>,
    pub sdf: Vec<f64>,
    pub deform_raw: Vec<[f64; 3]>,
    /// When false, hanging vertices are treated as free (used to expose
    /// cracks).
    pub enforce_constraints: bool,
    corners: Vec<[usize; 8]>,
    vertex_lookup: HashMap<[u32; 3], usize>,
    leaf_lookup: HashMap<Leaf, usize>,
    vertex_spacing: Vec<f64>,
    raw_constraints: BTreeMap<usize, FaceConstraint>,
    resolved: BTreeMap<usize, Vec<(usize, f64)>>,
}

/// Extraction counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OctreeStats {
    pub minimal_edges: usize,
    pub sign_change_edges: usize,
    pub quads: usize,
    pub triangles: usize,
    /// Sign-change minimal edges whose polygon could not be formed because a
    /// surrounding leaf has no matching loop.
    pub holes: usize,
}

fn sort_key(c: &[u32; 3]) -> (u32, u32, u32) {
    (c[2], c[1], c[0])
}

impl Octree {
    /// Unrefined tree over `base` level-0 cells; all values zero.
    pub fn uniform(base: [usize; 3], origin: [f64; 3], spacing: f64, max_depth: u8) -> Result<Self> {
        let s = 1u32 << max_depth;
        let mut leaves = Vec::with_capacity(base.iter().product());
        for z in 0..base[2] {
            for y in 0..base[1] {
                for x in 0..base[0] {
                    leaves.push(Leaf { level: 0, coord: [x as u32 * s, y as u32 * s, z as u32 * s] });
                }
            }
        }
        Self::from_leaves(base, origin, spacing, max_depth, leaves)
    }

    /// Tree with the given leaves; fails unless they tile the domain.
    pub fn from_leaves(base: [usize; 3], origin: [f64; 3], spacing: f64, max_depth: u8, leaves: Vec<Leaf>) -> Result<Self> {
        if base.contains(&0) {
            return Err(Error::InvalidGrid("octree base resolution must be positive".into()));
        }
        if !(spacing.is_finite() && spacing > 0.0) || origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("octree origin and spacing must be finite, spacing positive".into()));
        }
        if max_depth > 16 {
            return Err(Error::InvalidGrid(format!("octree depth {max_depth} exceeds 16")));
        }
        let mut t = Self {
            base,
            origin,
            spacing,
            max_depth,
            leaves,
            vertices: Vec::new(),
            sdf: Vec::new(),
            deform_raw: Vec::new(),
            enforce_constraints: true,
            corners: Vec::new(),
            vertex_lookup: HashMap::new(),
            leaf_lookup: HashMap::new(),
            vertex_spacing: Vec::new(),
            raw_constraints: BTreeMap::new(),
            resolved: BTreeMap::new(),
        };
        t.check_tiling()?;
        t.rebuild(|_| None);
        Ok(t)
    }

    /// Unrefined tree carrying the values of a uniform grid.
    pub fn from_grid(grid: &ScalarGrid, max_depth: u8) -> Result<Self> {
        grid.validate()?;
        let mut t = Self::uniform(grid.resolution, grid.origin, grid.spacing, max_depth)?;
        let s = 1u32 << max_depth;
        for (i, c) in t.vertices.iter().enumerate() {
            let g = grid.vertex_index([(c[0] / s) as usize, (c[1] / s) as usize, (c[2] / s) as usize]);
            t.sdf[i] = grid.sdf[g];
            t.deform_raw[i] = grid.deform_raw[g];
        }
        Ok(t)
    }

    pub fn snapshot(&self) -> OctreeSnapshot {
        OctreeSnapshot {
            base: self.base,
            origin: self.origin,
            spacing: self.spacing,
            max_depth: self.max_depth,
            leaves: self.leaves.clone(),
            vertices: self.vertices.clone(),
            sdf: self.sdf.clone(),
            deform_raw: self.deform_raw.clone(),
            enforce_constraints: self.enforce_constraints,
        }
    }

    pub fn from_snapshot(s: &OctreeSnapshot) -> Result<Self> {
        let mut t = Self::from_leaves(s.base, s.origin, s.spacing, s.max_depth, s.leaves.clone())?;
        if t.vertices != s.vertices || s.sdf.len() != s.vertices.len() || s.deform_raw.len() != s.vertices.len() {
            return Err(Error::Structure("octree snapshot vertices do not match its leaves".into()));
        }
        t.sdf = s.sdf.clone();
        t.deform_raw = s.deform_raw.clone();
        t.enforce_constraints = s.enforce_constraints;
        Ok(t)
    }

    pub fn leaf_size(&self, level: u8) -> u32 {
        1 << (self.max_depth - level)
    }

    /// World length of one finest-lattice unit.
    pub fn unit(&self) -> f64 {
        self.spacing / (1u64 << self.max_depth) as f64
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_corners(&self, leaf: usize) -> [usize; 8] {
        self.corners[leaf]
    }

    pub fn vertex_id(&self, c: [u32; 3]) -> Option<usize> {
        self.vertex_lookup.get(&c).copied()
    }

    pub fn leaf_id(&self, leaf: Leaf) -> Option<usize> {
        self.leaf_lookup.get(&leaf).copied()
    }

    pub fn lattice_position(&self, v: usize) -> [f64; 3] {
        let u = self.unit();
        let c = self.vertices[v];
        [0, 1, 2].map(|a| self.origin[a] + u * c[a] as f64)
    }

    /// Spacing used to bound the deformation of `v`: the edge length of the
    /// smallest leaf that has `v` as a corner.
    pub fn vertex_spacing(&self, v: usize) -> f64 {
        self.vertex_spacing[v]
    }

    pub fn is_constrained(&self, v: usize) -> bool {
        self.resolved.contains_key(&v)
    }

    /// Hanging vertices in terms of free vertices only.
    pub fn resolved_constraints(&self) -> &BTreeMap<usize, Vec<(usize, f64)>> {
        &self.resolved
    }

    /// Hanging vertices mapped to the coarse face they lie on. When a vertex
    /// lies on faces of several leaves, the largest leaf is used; all
    /// choices agree on shared edges.
    pub fn identify_constraints(&self) -> BTreeMap<usize, FaceConstraint> {
        self.raw_constraints.clone()
    }

    /// Overwrites every hanging vertex's sdf with the bilinear value of its
    /// coarse face and resets its deformation. Idempotent.
    pub fn constrain_sdf(&mut self) {
        for (&v, terms) in &self.resolved {
            self.sdf[v] = terms.iter().map(|&(f, w)| w * self.sdf[f]).sum();
            self.deform_raw[v] = [0.0; 3];
        }
    }

    fn check_tiling(&self) -> Result<()> {
        let s0 = 1u64 << self.max_depth;
        let extent = self.base.map(|b| b as u64 * s0);
        let mut volume = 0u128;
        let mut seen = BTreeSet::new();
        for l in &self.leaves {
            if l.level > self.max_depth {
                return Err(Error::Structure(format!("leaf level {} exceeds depth {}", l.level, self.max_depth)));
            }
            let s = self.leaf_size(l.level) as u64;
            for a in 0..3 {
                if !(l.coord[a] as u64).is_multiple_of(s) || l.coord[a] as u64 + s > extent[a] {
                    return Err(Error::Structure(format!("leaf {l:?} is misaligned or outside the domain")));
                }
            }
            if !seen.insert(*l) {
                return Err(Error::Structure(format!("leaf {l:?} appears twice")));
            }
            volume += (s as u128).pow(3);
        }
        if volume != extent.iter().map(|&e| e as u128).product::<u128>() {
            return Err(Error::Structure("leaves do not tile the domain".into()));
        }
        // Equal volume plus no leaf containing another leaf's centre rules out
        // overlap.
        let probe = Self::probe_index(&self.leaves);
        for l in &self.leaves {
            let s = self.leaf_size(l.level);
            let centre = l.coord.map(|c| 2 * c as i64 + s as i64);
            let owner = self.locate_in(&probe, centre);
            if owner != Some(*l) {
                return Err(Error::Structure(format!("leaf {l:?} overlaps another leaf")));
            }
        }
        Ok(())
    }

    fn probe_index(leaves: &[Leaf]) -> BTreeSet<Leaf> {
        leaves.iter().copied().collect()
    }

    /// Leaf containing a point given in doubled finest units.
    fn locate_in(&self, set: &BTreeSet<Leaf>, x: [i64; 3]) -> Option<Leaf> {
        self.locate_with(x, |l| set.contains(&l))
    }

    fn locate_with(&self, x: [i64; 3], has: impl Fn(Leaf) -> bool) -> Option<Leaf> {
        let s0 = 1i64 << self.max_depth;
        for a in 0..3 {
            if x[a] <= 0 || x[a] >= 2 * self.base[a] as i64 * s0 {
                return None;
            }
        }
        for level in 0..=self.max_depth {
            let s = self.leaf_size(level) as i64;
            let coord = x.map(|c| (c.div_euclid(2 * s) * s) as u32);
            let l = Leaf { level, coord };
            if has(l) {
                return Some(l);
            }
        }
        None
    }

    fn locate(&self, x: [i64; 3]) -> Option<usize> {
        self.locate_with(x, |l| self.leaf_lookup.contains_key(&l)).map(|l| self.leaf_lookup[&l])
    }

    /// Recomputes vertices and caches after the leaf set changed. Values of
    /// vertices that existed before come from `old`; new ones start at zero.
    fn rebuild(&mut self, old: impl Fn([u32; 3]) -> Option<(f64, [f64; 3])>) {
        let mut spacing: BTreeMap<(u32, u32, u32), ([u32; 3], u32)> = BTreeMap::new();
        for l in &self.leaves {
            let s = self.leaf_size(l.level);
            for off in CORNER_OFFSETS {
                let c = [0, 1, 2].map(|a| l.coord[a] + off[a] as u32 * s);
                let e = spacing.entry(sort_key(&c)).or_insert((c, s));
                e.1 = e.1.min(s);
            }
        }
        let unit = self.unit();
        self.vertices = spacing.values().map(|&(c, _)| c).collect();
        self.vertex_spacing = spacing.values().map(|&(_, s)| s as f64 * unit).collect();
        self.vertex_lookup = self.vertices.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        self.leaf_lookup = self.leaves.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        self.corners = self
            .leaves
            .iter()
            .map(|l| {
                let s = self.leaf_size(l.level);
                CORNER_OFFSETS.map(|off| self.vertex_lookup[&[0, 1, 2].map(|a| l.coord[a] + off[a] as u32 * s)])
            })
            .collect();
        let (sdf, deform): (Vec<f64>, Vec<[f64; 3]>) =
            self.vertices.iter().map(|&c| old(c).unwrap_or((0.0, [0.0; 3]))).unzip();
        self.sdf = sdf;
        self.deform_raw = deform;
        self.raw_constraints = self.find_constraints();
        self.resolved = self.resolve_constraints();
    }

    fn find_constraints(&self) -> BTreeMap<usize, FaceConstraint> {
        let mut out: BTreeMap<usize, (u32, FaceConstraint)> = BTreeMap::new();
        for (li, l) in self.leaves.iter().enumerate() {
            let s = self.leaf_size(l.level);
            if s == 1 {
                continue;
            }
            for f in 0..6 {
                let axis = f / 2;
                let (u, v) = face_axes(axis);
                let fc = face_corners(f);
                let ids = fc.map(|c| self.corners[li][c]);
                let mut base = l.coord;
                base[axis] += (f % 2) as u32 * s;
                for i in 0..=s {
                    for j in 0..=s {
                        if (i == 0 || i == s) && (j == 0 || j == s) {
                            continue;
                        }
                        let mut p = base;
                        p[u] += i;
                        p[v] += j;
                        let Some(&vid) = self.vertex_lookup.get(&p) else { continue };
                        let (a, b) = (i as f64 / s as f64, j as f64 / s as f64);
                        let c = FaceConstraint {
                            face: ids,
                            weights: [(1.0 - a) * (1.0 - b), a * (1.0 - b), a * b, (1.0 - a) * b],
                        };
                        match out.get(&vid) {
                            Some(&(prev, _)) if prev >= s => {}
                            _ => {
                                out.insert(vid, (s, c));
                            }
                        }
                    }
                }
            }
        }
        out.into_iter().map(|(k, (_, c))| (k, c)).collect()
    }

    fn resolve_constraints(&self) -> BTreeMap<usize, Vec<(usize, f64)>> {
        fn expand(
            v: usize,
            raw: &BTreeMap<usize, FaceConstraint>,
            memo: &mut BTreeMap<usize, Vec<(usize, f64)>>,
        ) -> Vec<(usize, f64)> {
            if let Some(r) = memo.get(&v) {
                return r.clone();
            }
            let Some(c) = raw.get(&v) else { return vec![(v, 1.0)] };
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for (&f, &w) in c.face.iter().zip(&c.weights) {
                if w == 0.0 {
                    continue;
                }
                for (g, wg) in expand(f, raw, memo) {
                    *acc.entry(g).or_insert(0.0) += w * wg;
                }
            }
            let r: Vec<(usize, f64)> = acc.into_iter().collect();
            memo.insert(v, r.clone());
            r
        }
        let mut memo = BTreeMap::new();
        for &v in self.raw_constraints.keys() {
            expand(v, &self.raw_constraints, &mut memo);
        }
        memo
    }

    /// Splits the given leaves into eight children each. Leaves already at
    /// the maximum depth are skipped with a warning. New vertices take the
    /// trilinear value of their parent; existing vertices keep theirs.
    /// Returns the flexible parameters mapped onto the new leaf order, with
    /// children starting from zero raw values.
    pub fn subdivide(&mut self, split: &[usize], params: &FlexParams) -> Result<FlexParams> {
        if params.num_cells() != self.leaves.len() {
            return Err(Error::Structure(format!(
                "{} parameter cells for {} leaves",
                params.num_cells(),
                self.leaves.len()
            )));
        }
        let mut marked = vec![false; self.leaves.len()];
        for &i in split {
            let l = self.leaves.get(i).ok_or_else(|| Error::IndexOutOfRange(format!("leaf {i}")))?;
            if l.level >= self.max_depth {
                log::warn!("leaf {i} is already at maximum depth {}", self.max_depth);
            } else {
                marked[i] = true;
            }
        }
        if !marked.iter().any(|&m| m) {
            return Ok(params.clone());
        }
        let mut new_values: HashMap<[u32; 3], (f64, [f64; 3])> = HashMap::new();
        for (i, c) in self.vertices.iter().enumerate() {
            new_values.insert(*c, (self.sdf[i], self.deform_raw[i]));
        }
        let mut leaves = Vec::with_capacity(self.leaves.len() + 7 * split.len());
        let mut out = FlexParams::new(0);
        for (i, l) in self.leaves.iter().enumerate() {
            if !marked[i] {
                leaves.push(*l);
                out.alpha_raw.push(params.alpha_raw[i]);
                out.beta_raw.push(params.beta_raw[i]);
                out.gamma_raw.push(params.gamma_raw[i]);
                continue;
            }
            let s = self.leaf_size(l.level);
            let h = s / 2;
            let vals = self.corners[i].map(|v| self.sdf[v]);
            for x in 0..=2u32 {
                for y in 0..=2u32 {
                    for z in 0..=2u32 {
                        let p = [l.coord[0] + x * h, l.coord[1] + y * h, l.coord[2] + z * h];
                        new_values.entry(p).or_insert_with(|| {
                            let t = [x, y, z].map(|k| k as f64 / 2.0);
                            (trilinear(&vals, t), [0.0; 3])
                        });
                    }
                }
            }
            for off in CORNER_OFFSETS {
                let coord = [0, 1, 2].map(|a| l.coord[a] + off[a] as u32 * h);
                leaves.push(Leaf { level: l.level + 1, coord });
                out.alpha_raw.push([0.0; 8]);
                out.beta_raw.push([0.0; 12]);
                out.gamma_raw.push(0.0);
            }
        }
        self.leaves = leaves;
        self.rebuild(|c| new_values.get(&c).copied());
        Ok(out)
    }

    fn config(&self, leaf: usize) -> u8 {
        let mut m = 0u8;
        for (k, &v) in self.corners[leaf].iter().enumerate() {
            if is_inside(self.sdf[v]) {
                m |= 1 << k;
            }
        }
        m
    }

    fn parity(&self, leaf: usize) -> u8 {
        let l = self.leaves[leaf];
        let s = self.leaf_size(l.level);
        (l.coord.iter().map(|&c| c / s).sum::<u32>() % 2) as u8
    }

    /// Flips shared ambiguous faces between equal-size neighbors where both
    /// loops cross twice.
    fn resolve_problem_faces(&self, tables: &DmcTables, cells: &mut [CellState]) {
        for _ in 0..8 {
            let mut changed = false;
            for c in 0..cells.len() {
                let l = self.leaves[c];
                let s = self.leaf_size(l.level);
                for axis in 0..3 {
                    let mut coord = l.coord;
                    coord[axis] += s;
                    let Some(&n) = self.leaf_lookup.get(&Leaf { level: l.level, coord }) else { continue };
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
        log::warn!("octree problem face resolution did not settle");
    }

    /// Minimal edges as `(low vertex, high vertex, axis)`, sorted.
    pub fn minimal_edges(&self) -> Vec<(usize, usize, usize)> {
        let mut set = BTreeSet::new();
        for l in &self.leaves {
            let s = self.leaf_size(l.level);
            for axis in 0..3 {
                let (u, v) = face_axes(axis);
                for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let mut p = l.coord;
                    p[u] += du * s;
                    p[v] += dv * s;
                    let mut prev: Option<usize> = None;
                    for t in 0..=s {
                        let mut q = p;
                        q[axis] += t;
                        if let Some(&id) = self.vertex_lookup.get(&q) {
                            if let Some(a) = prev {
                                set.insert((a, id, axis));
                            }
                            prev = Some(id);
                        }
                    }
                }
            }
        }
        set.into_iter().collect()
    }

    /// Dual vertex of `leaf` for the sign change on minimal edge `(p, q)`.
    fn dual_for(
        &self,
        tables: &DmcTables,
        cells: &[CellState],
        leaf: usize,
        p: [u32; 3],
        q: [u32; 3],
        axis: usize,
    ) -> Result<Option<usize>> {
        let l = self.leaves[leaf];
        let s = self.leaf_size(l.level);
        let (u, v) = perp_axes(axis);
        let side = |a: usize| -> Option<usize> {
            if p[a] == l.coord[a] {
                Some(0)
            } else if p[a] == l.coord[a] + s {
                Some(1)
            } else {
                None
            }
        };
        let st = &cells[leaf];
        match (side(u), side(v)) {
            (Some(su), Some(sv)) => {
                let lo = (su << u) | (sv << v);
                Ok(dual_on_edge(tables, st, edge_between(lo, lo | (1 << axis))))
            }
            (Some(sd), None) | (None, Some(sd)) => {
                let fa = if side(u).is_some() { u } else { v };
                let f = 2 * fa + sd;
                let case = tables.case(st.config, st.parity as usize, st.flips);
                let mut loops: Vec<usize> = face_edges(f)
                    .iter()
                    .filter_map(|&e| case.loop_of_edge(e))
                    .collect();
                loops.sort_unstable();
                loops.dedup();
                if loops.is_empty() || st.first_dual == u32::MAX {
                    return Ok(None);
                }
                if loops.len() == 1 {
                    return Ok(Some(st.first_dual as usize + loops[0]));
                }
                let mid = [0, 1, 2].map(|a| 0.5 * (p[a] as f64 + q[a] as f64));
                let best = loops
                    .iter()
                    .map(|&lp| {
                        let pts: Vec<[f64; 3]> = face_edges(f)
                            .iter()
                            .filter(|&&e| case.loop_of_edge(e) == Some(lp))
                            .map(|&e| self.lattice_crossing(leaf, e))
                            .collect();
                        let c = [0, 1, 2].map(|a| pts.iter().map(|x| x[a]).sum::<f64>() / pts.len() as f64);
                        let d: f64 = (0..3).map(|a| (c[a] - mid[a]).powi(2)).sum();
                        (d, lp)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, lp)| lp)
                    .expect("two loops");
                Ok(Some(st.first_dual as usize + best))
            }
            (None, None) => Err(Error::Structure(format!("minimal edge at {p:?} passes through leaf {leaf}"))),
        }
    }

    /// Linear zero crossing on a leaf edge in finest-lattice units.
    fn lattice_crossing(&self, leaf: usize, e: usize) -> [f64; 3] {
        let (a, b) = crate::tables::EDGES[e];
        let (va, vb) = (self.corners[leaf][a], self.corners[leaf][b]);
        let (sa, sb) = (self.sdf[va], self.sdf[vb]);
        let t = if sa == sb { 0.5 } else { sa / (sa - sb) };
        let (pa, pb) = (self.vertices[va], self.vertices[vb]);
        [0, 1, 2].map(|k| pa[k] as f64 + t * (pb[k] as f64 - pa[k] as f64))
    }

    /// Cases, dual vertices and polygons. Vertex positions are left empty.
    /// Expects constrained values to be projected already.
    pub fn topology(&self, tables: &DmcTables) -> Result<(QuadMesh, OctreeStats)> {
        if let Some(i) = self.sdf.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("octree sdf at vertex {i}")));
        }
        let mut cells: Vec<CellState> = (0..self.leaves.len())
            .map(|c| CellState { config: self.config(c), parity: self.parity(c), flips: 0, first_dual: u32::MAX })
            .collect();
        self.resolve_problem_faces(tables, &mut cells);

        let mut duals = Vec::new();
        for (c, st) in cells.iter_mut().enumerate() {
            let case = tables.case(st.config, st.parity as usize, st.flips);
            if case.loops.is_empty() {
                continue;
            }
            st.first_dual = duals.len() as u32;
            for (l, lp) in case.loops.iter().enumerate() {
                duals.push(DualVertex { cell: c, lp: l as u8, corners: self.corners[c], edges: lp.clone() });
            }
        }

        let mut stats = OctreeStats::default();
        let mut quads = Vec::new();
        let mut tris = Vec::new();
        let edges = self.minimal_edges();
        stats.minimal_edges = edges.len();
        for (a, b, axis) in edges {
            let inside = is_inside(self.sdf[a]);
            if inside == is_inside(self.sdf[b]) {
                continue;
            }
            stats.sign_change_edges += 1;
            let (p, q) = (self.vertices[a], self.vertices[b]);
            let (u, v) = perp_axes(axis);
            let mut ring = [None; 4];
            let mut on_boundary = false;
            for (k, (du, dv)) in [(1i64, 1i64), (-1, 1), (-1, -1), (1, -1)].into_iter().enumerate() {
                let mut x = p.map(|c| 2 * c as i64);
                x[axis] = p[axis] as i64 + q[axis] as i64;
                x[u] += du;
                x[v] += dv;
                match self.locate(x) {
                    Some(l) => ring[k] = Some(l),
                    None => on_boundary = true,
                }
            }
            if on_boundary {
                continue;
            }
            let mut poly: Vec<usize> = Vec::with_capacity(4);
            let mut hole = false;
            for leaf in ring.into_iter().flatten() {
                match self.dual_for(tables, &cells, leaf, p, q, axis)? {
                    Some(d) => poly.push(d),
                    None => hole = true,
                }
            }
            if hole {
                stats.holes += 1;
                continue;
            }
            poly.dedup();
            if poly.len() > 1 && poly.first() == poly.last() {
                poly.pop();
            }
            if !inside {
                poly.reverse();
            }
            match poly.len() {
                4 => quads.push([poly[0], poly[1], poly[2], poly[3]]),
                3 => tris.push([poly[0], poly[1], poly[2]]),
                _ => stats.holes += 1,
            }
        }
        stats.quads = quads.len();
        stats.triangles = tris.len();
        Ok((QuadMesh { vertices: Vec::new(), duals, quads, tris, cells }, stats))
    }

    /// Topology plus plain-float vertex placement.
    pub fn extract(&self, params: &FlexParams, tables: &DmcTables) -> Result<(QuadMesh, OctreeStats)> {
        if params.num_cells() != self.leaves.len() {
            return Err(Error::Structure(format!(
                "{} parameter cells for {} leaves",
                params.num_cells(),
                self.leaves.len()
            )));
        }
        let (mut q, stats) = self.topology(tables)?;
        q.vertices = place_vertices(self, params, &q.duals);
        Ok((q, stats))
    }

    /// Parameter group sizes for a [`Binder`].
    pub fn group_sizes(&self) -> [usize; 5] {
        let n = self.leaves.len();
        [self.vertices.len(), 3 * self.vertices.len(), 8 * n, 12 * n, n]
    }

    /// Sign-change minimal edges as vertex pairs, for the sign loss.
    pub fn sign_change_edges(&self) -> Vec<(usize, usize)> {
        self.minimal_edges()
            .into_iter()
            .filter(|&(a, b, _)| is_inside(self.sdf[a]) != is_inside(self.sdf[b]))
            .map(|(a, b, _)| (a, b))
            .collect()
    }
}

/// Trilinear interpolation of corner values at local coordinates `t`.
pub fn trilinear(vals: &[f64; 8], t: [f64; 3]) -> f64 {
    let mut out = 0.0;
    for (c, off) in CORNER_OFFSETS.iter().enumerate() {
        let mut w = 1.0;
        for a in 0..3 {
            w *= if off[a] == 1 { t[a] } else { 1.0 - t[a] };
        }
        out += w * vals[c];
    }
    out
}

impl VertexField for Octree {
    fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    fn sdf(&self, v: usize) -> f64 {
        self.sdf[v]
    }

    fn position(&self, v: usize) -> [f64; 3] {
        let p = self.lattice_position(v);
        if self.enforce_constraints && self.is_constrained(v) {
            return p;
        }
        let h = self.vertex_spacing[v];
        let d = self.deform_raw[v];
        [0, 1, 2].map(|a| p[a] + bounded_offset(d[a], h))
    }

    fn sdf_var(&self, tape: &mut Tape, binder: &mut Binder, v: usize) -> Var {
        if self.enforce_constraints {
            if let Some(terms) = self.resolved.get(&v) {
                if let Some(x) = binder.get(Group::Sdf, v) {
                    return x;
                }
                let parts: Vec<(Var, f64)> = terms
                    .iter()
                    .map(|&(f, w)| (binder.bind(tape, Group::Sdf, f, self.sdf[f]), w))
                    .collect();
                let x = tape.lincomb(&parts);
                binder.pin(Group::Sdf, v, x);
                return x;
            }
        }
        binder.bind(tape, Group::Sdf, v, self.sdf[v])
    }

    fn position_var(&self, tape: &mut Tape, binder: &mut Binder, v: usize) -> Var3 {
        let p = self.lattice_position(v);
        if self.enforce_constraints && self.is_constrained(v) {
            return tape.constant3(p);
        }
        let h = self.vertex_spacing[v];
        let mut out = p.map(|_| tape.constant(0.0));
        for a in 0..3 {
            let raw = binder.bind(tape, Group::Deform, 3 * v + a, self.deform_raw[v][a]);
            let t = tape.tanh(raw);
            let scaled = tape.scale(t, 0.5 * h);
            out[a] = tape.add_const(scaled, p[a]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{extract_quads, FlexParams};
    use crate::meshcheck::check_combinatorics;

    fn two_cells() -> Octree {
        Octree::uniform([2, 1, 1], [0.0; 3], 1.0, 1).unwrap()
    }

    fn sphere_tree(res: usize, depth: u8, r: f64) -> Octree {
        let h = 2.0 / res as f64;
        let mut t = Octree::uniform([res; 3], [-1.0; 3], h, depth).unwrap();
        for i in 0..t.vertices.len() {
            let p = t.lattice_position(i);
            t.sdf[i] = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r;
        }
        t
    }

    #[test]
    fn uniform_tree_has_no_constraints() {
        let t = Octree::uniform([3, 3, 3], [0.0; 3], 1.0, 2).unwrap();
        assert!(t.identify_constraints().is_empty());
        assert_eq!(t.vertices.len(), 64);
    }

    #[test]
    fn one_refined_child_constrains_five_vertices() {
        let mut t = two_cells();
        let p = FlexParams::new(2);
        t.subdivide(&[1], &p).unwrap();
        let c = t.identify_constraints();
        assert_eq!(c.len(), 5);
        for v in c.keys() {
            assert_eq!(t.vertices[*v][0], 2, "constrained vertex off the shared face");
        }
    }

    #[test]
    fn equal_siblings_share_no_constraints() {
        let mut t = two_cells();
        let p = FlexParams::new(2);
        t.subdivide(&[0, 1], &p).unwrap();
        assert!(t.identify_constraints().is_empty());
    }

    #[test]
    fn face_centre_takes_the_mean() {
        let mut t = two_cells();
        t.subdivide(&[1], &FlexParams::new(2)).unwrap();
        for (c, val) in [([2, 0, 0], 1.0), ([2, 2, 0], 2.0), ([2, 2, 2], 3.0), ([2, 0, 2], 4.0)] {
            let v = t.vertex_id(c).unwrap();
            t.sdf[v] = val;
        }
        let centre = t.vertex_id([2, 1, 1]).unwrap();
        t.sdf[centre] = -7.0;
        t.constrain_sdf();
        assert!((t.sdf[centre] - 2.5).abs() < 1e-12);
        let mid = t.vertex_id([2, 1, 0]).unwrap();
        assert!((t.sdf[mid] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn constant_face_stays_constant_and_projection_is_idempotent() {
        let mut t = sphere_tree(4, 2, 0.55);
        let leaves: Vec<usize> = (0..t.num_leaves()).step_by(3).collect();
        let p = FlexParams::new(t.num_leaves());
        let p = t.subdivide(&leaves, &p).unwrap();
        let more: Vec<usize> = (0..t.num_leaves()).step_by(5).collect();
        t.subdivide(&more, &p).unwrap();
        for s in t.sdf.iter_mut() {
            *s += 0.01;
        }
        t.constrain_sdf();
        let once = t.sdf.clone();
        t.constrain_sdf();
        assert_eq!(once, t.sdf);

        let mut c = two_cells();
        c.subdivide(&[1], &FlexParams::new(2)).unwrap();
        c.sdf.iter_mut().for_each(|s| *s = 0.75);
        let centre = c.vertex_id([2, 1, 1]).unwrap();
        c.sdf[centre] = 0.0;
        c.constrain_sdf();
        assert_eq!(c.sdf[centre], 0.75);
    }

    #[test]
    fn overlapping_leaves_are_rejected() {
        let leaves = vec![
            Leaf { level: 0, coord: [0, 0, 0] },
            Leaf { level: 1, coord: [0, 0, 0] },
        ];
        assert!(Octree::from_leaves([1, 1, 1], [0.0; 3], 1.0, 1, leaves).is_err());
        let gap = vec![Leaf { level: 0, coord: [0, 0, 0] }];
        assert!(Octree::from_leaves([2, 1, 1], [0.0; 3], 1.0, 1, gap).is_err());
    }

    #[test]
    fn uniform_tree_matches_grid_extraction() {
        let tables = DmcTables::build().unwrap();
        let grid = ScalarGrid::from_fn([6; 3], [-1.0; 3], 2.0 / 6.0, |p| {
            (p[0] * p[0] + 0.7 * p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6
        })
        .unwrap();
        let t = Octree::from_grid(&grid, 2).unwrap();
        let q = extract_quads(&grid, &FlexParams::new(grid.num_cells()), &tables).unwrap();
        let (o, stats) = t.extract(&FlexParams::new(t.num_leaves()), &tables).unwrap();
        assert_eq!(stats.holes, 0);
        assert_eq!(o.quads.len(), q.quads.len());
        assert!(o.tris.is_empty());
        let key = |v: &[f64; 3]| v.map(|x| (x * 1e9).round() as i64);
        let mut a: Vec<_> = q.vertices.iter().map(key).collect();
        let mut b: Vec<_> = o.vertices.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn refined_sphere_is_watertight_under_constraints() {
        let tables = DmcTables::build().unwrap();
        let mut t = sphere_tree(8, 2, 0.62);
        let p = FlexParams::new(t.num_leaves());
        let (q, _) = t.topology(&tables).unwrap();
        let surface: Vec<usize> = q.cells.iter().enumerate().filter(|(_, c)| c.first_dual != u32::MAX).map(|(i, _)| i).collect();
        let half: Vec<usize> = surface.into_iter().filter(|&i| t.leaves[i].coord[0] >= 16).collect();
        let p = t.subdivide(&half, &p).unwrap();
        t.constrain_sdf();
        let (q, stats) = t.extract(&p, &tables).unwrap();
        assert!(stats.triangles > 0);
        assert_eq!(stats.holes, 0);
        let topo = check_combinatorics(&q.fan_triangles()).unwrap();
        assert_eq!(topo.boundary_edges, 0);
        assert_eq!(topo.non_manifold_edges, 0);
        assert_eq!(topo.euler, 2);
    }

    #[test]
    fn mismatched_hanging_vertex_cracks_without_constraints() {
        let tables = DmcTables::build().unwrap();
        let mut t = Octree::uniform([2, 2, 2], [0.0; 3], 1.0, 1).unwrap();
        t.sdf.iter_mut().for_each(|s| *s = 1.0);
        let p = FlexParams::new(t.num_leaves());
        let right = t.leaf_id(Leaf { level: 0, coord: [2, 0, 0] }).unwrap();
        let p = t.subdivide(&[right], &p).unwrap();
        let hanging = t.vertex_id([2, 1, 1]).unwrap();
        t.sdf[hanging] = -1.0;
        t.enforce_constraints = false;
        let (q, stats) = t.extract(&p, &tables).unwrap();
        assert!(stats.holes > 0);
        assert!(check_combinatorics(&q.fan_triangles()).unwrap().boundary_edges > 0);

        t.enforce_constraints = true;
        t.constrain_sdf();
        let (q, _) = t.extract(&p, &tables).unwrap();
        assert_eq!(check_combinatorics(&q.fan_triangles()).unwrap().boundary_edges, 0);
    }

    #[test]
    fn subdivision_keeps_parent_field() {
        let mut t = two_cells();
        for i in 0..t.vertices.len() {
            let c = t.vertices[i];
            t.sdf[i] = c[0] as f64 + 2.0 * c[1] as f64 - c[2] as f64;
        }
        t.subdivide(&[0], &FlexParams::new(2)).unwrap();
        for (i, c) in t.vertices.iter().enumerate() {
            let want = c[0] as f64 + 2.0 * c[1] as f64 - c[2] as f64;
            assert!((t.sdf[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn max_depth_is_a_no_op() {
        let mut t = Octree::uniform([1, 1, 1], [0.0; 3], 1.0, 0).unwrap();
        let p = FlexParams::new(1);
        let out = t.subdivide(&[0], &p).unwrap();
        assert_eq!(out, p);
        assert_eq!(t.num_leaves(), 1);
    }

    #[test]
    fn constrained_values_have_no_gradient_of_their_own() {
        let mut t = two_cells();
        t.subdivide(&[1], &FlexParams::new(2)).unwrap();
        let centre = t.vertex_id([2, 1, 1]).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(t.group_sizes());
        let x = t.sdf_var(&mut tape, &mut binder, centre);
        let g = tape.backward(x).unwrap();
        let grads = binder.gradient(&g, Group::Sdf);
        assert_eq!(grads[centre], 0.0);
        let corner = t.vertex_id([2, 0, 0]).unwrap();
        assert!((grads[corner] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut t = sphere_tree(3, 1, 0.5);
        t.subdivide(&[4], &FlexParams::new(t.num_leaves())).unwrap();
        let s = t.snapshot();
        let json = serde_json::to_string(&s).unwrap();
        let back = Octree::from_snapshot(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.sdf, t.sdf);
        assert_eq!(back.leaves, t.leaves);
    }
}

#[cfg(test)]
mod deep_tests {
    use super::*;
    use crate::meshcheck::check_combinatorics;

    #[test]
    fn two_level_jumps_stay_closed() {
        let tables = DmcTables::build().unwrap();
        let res = 8;
        let h = 2.0 / res as f64;
        let mut t = Octree::uniform([res; 3], [-1.0; 3], h, 3).unwrap();
        let f = |p: [f64; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.58;
        let mut p = FlexParams::new(t.num_leaves());
        for _ in 0..2 {
            for i in 0..t.vertices.len() {
                t.sdf[i] = f(t.lattice_position(i));
            }
            let (q, _) = t.topology(&tables).unwrap();
            let split: Vec<usize> = q
                .cells
                .iter()
                .enumerate()
                .filter(|(i, c)| c.first_dual != u32::MAX && t.leaves[*i].coord[2] < 32)
                .map(|(i, _)| i)
                .collect();
            p = t.subdivide(&split, &p).unwrap();
        }
        for i in 0..t.vertices.len() {
            t.sdf[i] = f(t.lattice_position(i));
        }
        t.constrain_sdf();
        let (q, stats) = t.extract(&p, &tables).unwrap();
        let topo = check_combinatorics(&q.fan_triangles()).unwrap();
        assert_eq!(stats.holes, 0, "{stats:?}");
        assert_eq!(topo.boundary_edges, 0, "{topo:?}");
    }
}
