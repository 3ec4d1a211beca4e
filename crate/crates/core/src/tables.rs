//! Dual marching cubes case tables.
//!
//! Cube corners are numbered `c = x + 2y + 4z`. Edges are grouped by axis:
//! 0..4 run along x, 4..8 along y and 8..12 along z. Faces are numbered
//! `2 * axis + side`.
//!
//! Loops (primal faces) are traced on the cube surface from per-face
//! segments. A face with two sign-change edges has one segment; a face with
//! four (corners of equal sign on a diagonal) is ambiguous. Ambiguous faces
//! are resolved by position, not by sign: the diagonal whose two corners have
//! an even lattice coordinate sum is joined. The rule depends only on the
//! face, so two cells sharing a face always agree, and the table is
//! symmetric under sign complement. Cells come in two parities (the parity
//! of their minimum corner), each with its own table.
//!
//! With that rule alone, a cell can have one loop that crosses an ambiguous
//! face twice. When both cells on either side of that face do so, the dual
//! edge between them would be shared by four quads. Such faces are reported
//! in [`CubeCase::problem_faces`]; extractors flip the resolution of the
//! shared face in both cells ([`DmcTables::case`] with `flips`), which splits
//! the loops again and keeps the dual mesh 2-manifold.
//!
//! Loops have 3 to 8 edges; the 8-edge loops are the tunnel cases where two
//! diagonal slabs are joined through both ambiguous faces.

use serde::Serialize;

use crate::error::{Error, Result};

pub const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Corner pairs `(lo, hi)` of the 12 cube edges; `hi = lo | (1 << axis)`.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

#[inline]
pub fn edge_axis(e: usize) -> usize {
    e / 4
}

/// Edge index between two corners that differ in exactly one bit.
pub fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    EDGES
        .iter()
        .position(|&(x, y)| x == lo && y == hi)
        .expect("corners are not adjacent")
}

/// In-plane axes of a face normal to `axis`, in increasing order.
#[inline]
pub fn face_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Corners of face `f` ordered (0,0), (1,0), (1,1), (0,1) in its in-plane
/// axes, so opposite entries are diagonal and entries 0,2 form the main
/// diagonal.
pub fn face_corners(f: usize) -> [usize; 4] {
    let axis = f / 2;
    let side = f % 2;
    let (u, v) = face_axes(axis);
    let base = side << axis;
    [base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)]
}

/// Face edges in the cyclic order of [`face_corners`]: edge k joins corners
/// k and k+1.
pub fn face_edges(f: usize) -> [usize; 4] {
    let c = face_corners(f);
    [
        edge_between(c[0], c[1]),
        edge_between(c[1], c[2]),
        edge_between(c[2], c[3]),
        edge_between(c[3], c[0]),
    ]
}

/// The two faces containing edge `e`.
pub fn edge_faces(e: usize) -> [usize; 2] {
    let axis = edge_axis(e);
    let lo = EDGES[e].0;
    let (u, v) = face_axes(axis);
    [2 * u + ((lo >> u) & 1), 2 * v + ((lo >> v) & 1)]
}

/// Face on the other side of the shared wall, as seen from the neighbor.
#[inline]
pub fn opposite_face(f: usize) -> usize {
    f ^ 1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CubeCase {
    /// Bit `c` set when corner `c` is inside (negative).
    pub config: u8,
    /// Each loop is an ordered cycle of cube edge indices; the winding gives a
    /// normal pointing from inside to outside.
    pub loops: Vec<Vec<u8>>,
    /// Loop index of each edge, `u8::MAX` when the edge has no sign change.
    pub edge_loop: [u8; 12],
    /// Bit `f` set when a single loop crosses ambiguous face `f` twice.
    pub problem_faces: u8,
    /// Bit `f` set when face `f` is ambiguous.
    pub ambiguous_faces: u8,
}

impl CubeCase {
    pub fn loop_of_edge(&self, e: usize) -> Option<usize> {
        let l = self.edge_loop[e];
        (l != u8::MAX).then_some(l as usize)
    }

    pub fn num_loops(&self) -> usize {
        self.loops.len()
    }
}

#[inline]
pub fn edge_cut(config: u8, e: usize) -> bool {
    let (a, b) = EDGES[e];
    ((config >> a) & 1) != ((config >> b) & 1)
}

/// Segments on face `f` as pairs of edge indices.
fn face_segments(config: u8, f: usize, flip: bool) -> Vec<(usize, usize)> {
    let edges = face_edges(f);
    let cut: Vec<usize> = (0..4).filter(|&k| edge_cut(config, edges[k])).collect();
    match cut.len() {
        0 => vec![],
        2 => vec![(edges[cut[0]], edges[cut[1]])],
        4 => {
            // Cut off the corners of the diagonal that is not joined. Corner k
            // is incident to face edges k-1 and k.
            let isolated: [usize; 2] = if flip { [0, 2] } else { [1, 3] };
            isolated
                .iter()
                .map(|&k| (edges[(k + 3) % 4], edges[k]))
                .collect()
        }
        _ => unreachable!("a face always has an even number of sign changes"),
    }
}

fn ambiguous_mask(config: u8) -> u8 {
    let mut m = 0u8;
    for f in 0..6 {
        if face_edges(f).iter().all(|&e| edge_cut(config, e)) {
            m |= 1 << f;
        }
    }
    m
}

fn edge_midpoint(e: usize) -> [f64; 3] {
    let (a, b) = EDGES[e];
    let (pa, pb) = (CORNER_OFFSETS[a], CORNER_OFFSETS[b]);
    [0, 1, 2].map(|k| 0.5 * (pa[k] + pb[k]) as f64)
}

/// Traces loops for one configuration under the given face flips.
pub fn trace_case(config: u8, flips: u8) -> Result<CubeCase> {
    // neighbor[e] = the two edges joined to e by segments
    let mut nbr: [[usize; 2]; 12] = [[usize::MAX; 2]; 12];
    let mut deg = [0usize; 12];
    for f in 0..6 {
        for (a, b) in face_segments(config, f, (flips >> f) & 1 == 1) {
            for (x, y) in [(a, b), (b, a)] {
                if deg[x] >= 2 {
                    return Err(Error::Table(format!("edge {x} has degree > 2 in case {config}")));
                }
                nbr[x][deg[x]] = y;
                deg[x] += 1;
            }
        }
    }
    let mut edge_loop = [u8::MAX; 12];
    let mut loops: Vec<Vec<u8>> = Vec::new();
    for start in 0..12 {
        if !edge_cut(config, start) || edge_loop[start] != u8::MAX {
            continue;
        }
        if deg[start] != 2 {
            return Err(Error::Table(format!("edge {start} has degree {} in case {config}", deg[start])));
        }
        let id = loops.len() as u8;
        let mut lp = vec![start as u8];
        edge_loop[start] = id;
        let (mut prev, mut cur) = (start, nbr[start][0]);
        while cur != start {
            if edge_loop[cur] != u8::MAX {
                return Err(Error::Table(format!("loop is not a simple cycle in case {config}")));
            }
            edge_loop[cur] = id;
            lp.push(cur as u8);
            let next = if nbr[cur][0] == prev { nbr[cur][1] } else { nbr[cur][0] };
            prev = cur;
            cur = next;
        }
        orient_loop(config, &mut lp);
        loops.push(lp);
    }
    let ambiguous_faces = ambiguous_mask(config);
    let mut problem_faces = 0u8;
    for f in 0..6 {
        if (ambiguous_faces >> f) & 1 == 1 {
            let fe = face_edges(f);
            let l0 = edge_loop[fe[0]];
            if fe.iter().all(|&e| edge_loop[e] == l0) {
                problem_faces |= 1 << f;
            }
        }
    }
    Ok(CubeCase { config, loops, edge_loop, problem_faces, ambiguous_faces })
}

/// Orients `lp` so its normal points from inside to outside.
fn orient_loop(config: u8, lp: &mut [u8]) {
    // Each face segment votes: walking it with the outward face normal up,
    // the inside corner must lie to the left.
    let mut votes = 0i32;
    for i in 0..lp.len() {
        let (e0, e1) = (lp[i] as usize, lp[(i + 1) % lp.len()] as usize);
        let fa = edge_faces(e0);
        let fb = edge_faces(e1);
        let Some(&f) = fa.iter().find(|f| fb.contains(f)) else { continue };
        let axis = f / 2;
        let mut n = [0.0; 3];
        n[axis] = if f % 2 == 1 { 1.0 } else { -1.0 };
        let (p, q) = (edge_midpoint(e0), edge_midpoint(e1));
        let t = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
        let side = [t[1] * n[2] - t[2] * n[1], t[2] * n[0] - t[0] * n[2], t[0] * n[1] - t[1] * n[0]];
        let (a, b) = EDGES[e0];
        let inside = if (config >> a) & 1 == 1 { a } else { b };
        let m = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1]), 0.5 * (p[2] + q[2])];
        let c = CORNER_OFFSETS[inside];
        let dot: f64 = (0..3).map(|k| side[k] * (c[k] as f64 - m[k])).sum();
        votes += if dot > 0.0 { 1 } else { -1 };
    }
    if votes < 0 {
        lp[1..].reverse();
    }
}

/// Face resolution bits of a cell whose minimum corner has lattice
/// coordinate sum of the given parity. Ambiguous faces always join the two
/// face corners with even coordinate sum, which is a property of the face
/// alone, so neighbors agree.
#[inline]
pub fn parity_resolution(parity: usize) -> u8 {
    if parity.is_multiple_of(2) {
        0b10_1010
    } else {
        0b01_0101
    }
}

/// Every configuration under every face resolution.
#[derive(Clone, Debug)]
pub struct DmcTables {
    /// Indexed by `config * 64 + resolution`, resolution bits already masked
    /// to the ambiguous faces of the config.
    all: Vec<CubeCase>,
}

impl DmcTables {
    pub fn build() -> Result<Self> {
        let mut all = Vec::with_capacity(256 * 64);
        for config in 0..=255u8 {
            let amb = ambiguous_mask(config);
            for res in 0..64u8 {
                all.push(trace_case(config, res & amb)?);
            }
        }
        let t = Self { all };
        t.check()?;
        Ok(t)
    }

    /// Case of a cell with even corner parity (see [`parity_resolution`]).
    #[inline]
    pub fn lookup(&self, config: u8) -> &CubeCase {
        self.case(config, 0, 0)
    }

    /// Case of a cell of the given parity with extra face flips applied.
    #[inline]
    pub fn case(&self, config: u8, parity: usize, flips: u8) -> &CubeCase {
        let res = (parity_resolution(parity) ^ flips) & 63;
        &self.all[config as usize * 64 + res as usize]
    }

    pub fn cases(&self, parity: usize) -> Vec<&CubeCase> {
        (0..=255u8).map(|c| self.case(c, parity, 0)).collect()
    }

    /// Both parity tables as JSON: `{"even": [...256], "odd": [...256]}`.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            even: Vec<&'a CubeCase>,
            odd: Vec<&'a CubeCase>,
        }
        Ok(serde_json::to_string_pretty(&Dump { even: self.cases(0), odd: self.cases(1) })?)
    }

    fn check(&self) -> Result<()> {
        for case in &self.all {
            let cuts = (0..12).filter(|&e| edge_cut(case.config, e)).count();
            let covered: usize = case.loops.iter().map(|l| l.len()).sum();
            if cuts != covered {
                return Err(Error::Table(format!("coverage mismatch in case {}", case.config)));
            }
            if case.loops.iter().any(|l| l.len() < 3) {
                return Err(Error::Table(format!("short loop in case {}", case.config)));
            }
        }
        Ok(())
    }
}

/// Sign configuration of 8 corner values.
#[inline]
pub fn config_of(values: &[f64; 8]) -> u8 {
    let mut m = 0u8;
    for (c, &s) in values.iter().enumerate() {
        if crate::grid::is_inside(s) {
            m |= 1 << c;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tables() -> DmcTables {
        DmcTables::build().unwrap()
    }

    #[test]
    fn empty_and_full_cases() {
        let t = tables();
        assert!(t.lookup(0x00).loops.is_empty());
        assert!(t.lookup(0xFF).loops.is_empty());
    }

    #[test]
    fn single_corner_is_a_triangle_over_incident_edges() {
        let t = tables();
        for c in 0..8 {
            let case = t.case(1 << c, c % 2, 0);
            assert_eq!(case.loops.len(), 1);
            let mut got: Vec<usize> = case.loops[0].iter().map(|&e| e as usize).collect();
            got.sort();
            let mut want: Vec<usize> = (0..3).map(|a| edge_between(c, c ^ (1 << a))).collect();
            want.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn single_corner_triangle_faces_away_from_the_corner() {
        let t = tables();
        for c in 0..8 {
            let case = t.case(1 << c, 0, 0);
            let p: Vec<[f64; 3]> = case.loops[0].iter().map(|&e| edge_midpoint(e as usize)).collect();
            let u = [0, 1, 2].map(|k| p[1][k] - p[0][k]);
            let v = [0, 1, 2].map(|k| p[2][k] - p[0][k]);
            let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
            let away: f64 = (0..3).map(|k| n[k] * (p[0][k] - CORNER_OFFSETS[c][k] as f64)).sum();
            assert!(away > 0.0, "corner {c}");
        }
    }

    #[test]
    fn loop_sizes_are_bounded() {
        let t = tables();
        for parity in 0..2 {
            for case in t.cases(parity) {
                assert!(case.loops.len() <= 4);
                assert!(case.loops.iter().all(|l| (3..=8).contains(&l.len())));
            }
        }
    }

    #[test]
    fn opposite_corners_give_two_triangles() {
        let t = tables();
        for (c, parity) in (0..8).flat_map(|c| [(c, 0), (c, 1)]) {
            let case = t.case((1 << c) | (1 << (7 - c)), parity, 0);
            assert_eq!(case.loops.len(), 2);
            assert!(case.loops.iter().all(|l| l.len() == 3));
        }
    }

    #[test]
    fn complement_reverses_orientation() {
        let t = tables();
        for (m, parity) in (0..=255u8).flat_map(|m| [(m, 0), (m, 1)]) {
            let a = t.case(m, parity, 0);
            let b = t.case(!m, parity, 0);
            assert_eq!(a.loops.len(), b.loops.len());
            assert_eq!(a.problem_faces, b.problem_faces);
            for (la, lb) in a.loops.iter().zip(&b.loops) {
                assert_eq!(la[0], lb[0]);
                let mut rev: Vec<u8> = la.clone();
                rev[1..].reverse();
                assert_eq!(&rev, lb, "config {m}");
            }
        }
    }

    #[test]
    fn loops_are_closed_cycles_on_the_cube_graph() {
        let t = tables();
        for case in &t.all {
            for lp in &case.loops {
                for i in 0..lp.len() {
                    let (a, b) = (lp[i] as usize, lp[(i + 1) % lp.len()] as usize);
                    let fa = edge_faces(a);
                    let fb = edge_faces(b);
                    assert!(fa.iter().any(|f| fb.contains(f)), "consecutive edges share a face");
                }
            }
        }
    }

    #[test]
    fn face_helpers_are_consistent() {
        for f in 0..6 {
            let c = face_corners(f);
            for e in face_edges(f) {
                assert!(edge_faces(e).contains(&f));
                let (a, b) = EDGES[e];
                assert!(c.contains(&a) && c.contains(&b));
            }
        }
    }

    #[test]
    fn flipping_a_problem_face_splits_it() {
        let t = tables();
        let mut seen = 0;
        for (case, parity) in (0..=255u8).flat_map(|m| [(t.case(m, 0, 0), 0), (t.case(m, 1, 0), 1)]) {
            for f in 0..6 {
                if (case.problem_faces >> f) & 1 == 1 {
                    seen += 1;
                    let alt = t.case(case.config, parity, 1 << f);
                    assert_eq!(alt.problem_faces & (1 << f), 0, "config {}", case.config);
                    assert_eq!(alt.loops.len(), case.loops.len() + 1);
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn json_dump_lists_all_cases() {
        let t = tables();
        let v: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(v["even"].as_array().unwrap().len(), 256);
        assert_eq!(v["odd"].as_array().unwrap().len(), 256);
    }
}
