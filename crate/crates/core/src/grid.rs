//! Regular sampling lattice holding the scalar field and the bounded
//! per-vertex deformation.
//!
//! Vertices are stored x-fastest: `index = i + (nx+1) * (j + (ny+1) * k)`.
//! Cells use the same ordering over `nx * ny * nz`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, Group};
use crate::tables::CORNER_OFFSETS;
use crate::tape::{Tape, Var3};

/// Lattice index triple of a grid vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VertexId(pub [usize; 3]);

/// Lattice index triple of a grid cell (its minimum corner).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellId(pub [usize; 3]);

/// Sign convention shared by every extractor: strictly negative is inside,
/// zero counts as outside.
#[inline]
pub fn is_inside(s: f64) -> bool {
    s < 0.0
}

/// Bounded displacement for one axis: `0.5 * h * tanh(raw)`.
#[inline]
pub fn bounded_offset(raw: f64, spacing: f64) -> f64 {
    0.5 * spacing * raw.tanh()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    pub resolution: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
    pub sdf: Vec<f64>,
    pub deform_raw: Vec<[f64; 3]>,
}

impl ScalarGrid {
    pub fn new(resolution: [usize; 3], origin: [f64; 3], spacing: f64) -> Result<Self> {
        if resolution.contains(&0) {
            return Err(Error::InvalidGrid("resolution must be >= 1 per axis".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing {spacing} must be positive")));
        }
        let nv = (resolution[0] + 1) * (resolution[1] + 1) * (resolution[2] + 1);
        Ok(Self {
            resolution,
            origin,
            spacing,
            sdf: vec![1.0; nv],
            deform_raw: vec![[0.0; 3]; nv],
        })
    }

    /// `res^3` cells covering `[-1, 1]^3`.
    pub fn unit_domain(res: usize) -> Result<Self> {
        Self::new([res; 3], [-1.0; 3], 2.0 / res.max(1) as f64)
    }

    /// Samples `f` at the undeformed lattice positions.
    pub fn from_fn(
        resolution: [usize; 3],
        origin: [f64; 3],
        spacing: f64,
        f: impl Fn([f64; 3]) -> f64,
    ) -> Result<Self> {
        let mut g = Self::new(resolution, origin, spacing)?;
        for v in 0..g.num_vertices() {
            g.sdf[v] = f(g.lattice_position(v));
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.contains(&0) {
            return Err(Error::InvalidGrid("zero resolution".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::InvalidGrid("non-positive spacing".into()));
        }
        let nv = self.num_vertices();
        if self.sdf.len() != nv || self.deform_raw.len() != nv {
            return Err(Error::InvalidGrid(format!(
                "expected {nv} vertices, got sdf={} deform={}",
                self.sdf.len(),
                self.deform_raw.len()
            )));
        }
        if let Some(i) = self.sdf.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sdf at vertex {i}")));
        }
        Ok(())
    }

    #[inline]
    pub fn vertex_dims(&self) -> [usize; 3] {
        [self.resolution[0] + 1, self.resolution[1] + 1, self.resolution[2] + 1]
    }

    pub fn num_vertices(&self) -> usize {
        let d = self.vertex_dims();
        d[0] * d[1] * d[2]
    }

    pub fn num_cells(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    #[inline]
    pub fn vertex_index(&self, v: [usize; 3]) -> usize {
        let d = self.vertex_dims();
        v[0] + d[0] * (v[1] + d[1] * v[2])
    }

    #[inline]
    pub fn vertex_coords(&self, idx: usize) -> [usize; 3] {
        let d = self.vertex_dims();
        [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])]
    }

    #[inline]
    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        let r = self.resolution;
        c[0] + r[0] * (c[1] + r[1] * c[2])
    }

    #[inline]
    pub fn cell_coords(&self, idx: usize) -> [usize; 3] {
        let r = self.resolution;
        [idx % r[0], (idx / r[0]) % r[1], idx / (r[0] * r[1])]
    }

    /// Cell containing lattice offsets `c + d`, if inside the grid.
    pub fn cell_offset(&self, c: [usize; 3], d: [i64; 3]) -> Option<usize> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let x = c[a] as i64 + d[a];
            if x < 0 || x >= self.resolution[a] as i64 {
                return None;
            }
            out[a] = x as usize;
        }
        Some(self.cell_index(out))
    }

    /// Vertex indices of a cell's 8 corners, in the cube corner order of
    /// [`CORNER_OFFSETS`].
    pub fn cell_corners(&self, cell: usize) -> [usize; 8] {
        let c = self.cell_coords(cell);
        let mut out = [0usize; 8];
        for (k, o) in CORNER_OFFSETS.iter().enumerate() {
            out[k] = self.vertex_index([c[0] + o[0], c[1] + o[1], c[2] + o[2]]);
        }
        out
    }

    pub fn lattice_position(&self, idx: usize) -> [f64; 3] {
        let v = self.vertex_coords(idx);
        [
            self.origin[0] + self.spacing * v[0] as f64,
            self.origin[1] + self.spacing * v[1] as f64,
            self.origin[2] + self.spacing * v[2] as f64,
        ]
    }

    pub fn deformed_position(&self, idx: usize) -> [f64; 3] {
        let p = self.lattice_position(idx);
        let d = self.deform_raw[idx];
        [
            p[0] + bounded_offset(d[0], self.spacing),
            p[1] + bounded_offset(d[1], self.spacing),
            p[2] + bounded_offset(d[2], self.spacing),
        ]
    }

    /// Lattice position plus `0.5 h tanh(deform_raw)` per axis.
    pub fn deformed_positions(&self) -> Vec<[f64; 3]> {
        (0..self.num_vertices()).map(|i| self.deformed_position(i)).collect()
    }

    /// Deformed position of vertex `idx` recorded on `tape`.
    pub fn deformed_position_var(&self, tape: &mut Tape, binder: &mut Binder, idx: usize) -> Var3 {
        let p = self.lattice_position(idx);
        let mut out = p.map(|_| tape.constant(0.0));
        for a in 0..3 {
            let raw = binder.bind(tape, Group::Deform, 3 * idx + a, self.deform_raw[idx][a]);
            let t = tape.tanh(raw);
            let scaled = tape.scale(t, 0.5 * self.spacing);
            out[a] = tape.add_const(scaled, p[a]);
        }
        out
    }

    /// Flat `[x0,y0,z0,x1,...]` view used by the optimizer.
    pub fn deform_flat(&self) -> Vec<f64> {
        self.deform_raw.iter().flat_map(|d| d.iter().copied()).collect()
    }

    pub fn set_deform_flat(&mut self, flat: &[f64]) {
        for (d, c) in self.deform_raw.iter_mut().zip(flat.chunks_exact(3)) {
            *d = [c[0], c[1], c[2]];
        }
    }

    /// Snapshot as JSON. Field order: `version`, `resolution`, `origin`,
    /// `spacing`, `sdf`, `deform_raw`.
    pub fn to_snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GridSnapshot {
            version: SNAPSHOT_VERSION,
            grid: self.clone(),
        })?)
    }

    pub fn from_snapshot_json(s: &str) -> Result<Self> {
        let snap: GridSnapshot = serde_json::from_str(s)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported grid snapshot version {}",
                snap.version
            )));
        }
        snap.grid.validate()?;
        Ok(snap.grid)
    }
}

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GridSnapshot {
    version: u32,
    #[serde(flatten)]
    grid: ScalarGrid,
}

/// Scaled Jacobian at each of the 8 corners of a hexahedron given in cube
/// corner order. Positive everywhere means the cell is not inverted.
pub fn corner_scaled_jacobians(p: &[[f64; 3]; 8]) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (c, o) in CORNER_OFFSETS.iter().enumerate() {
        let mut axes = [[0.0; 3]; 3];
        for a in 0..3 {
            let n = c ^ (1 << a);
            let sign = if o[a] == 0 { 1.0 } else { -1.0 };
            for k in 0..3 {
                axes[a][k] = sign * (p[n][k] - p[c][k]);
            }
            let len = (axes[a][0].powi(2) + axes[a][1].powi(2) + axes[a][2].powi(2)).sqrt();
            for k in 0..3 {
                axes[a][k] /= len;
            }
        }
        out[c] = det3(axes[0], axes[1], axes[2]);
    }
    out
}

pub(crate) fn det3(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0])
}
