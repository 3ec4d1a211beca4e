//! Triangle meshes and Wavefront OBJ input/output.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Set for vertices inserted at quad centers by the training split.
    pub midpoint: Vec<bool>,
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Self {
        let midpoint = vec![false; vertices.len()];
        Self { vertices, triangles, midpoint }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::IndexOutOfRange(format!("triangle {t} references {tri:?}, {n} vertices")));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        self.triangles[t].map(|v| self.vertices[v])
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    /// Unit normal of triangle `t` (zero for degenerate triangles).
    pub fn normal(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.triangle(t);
        normalize(cross(sub(b, a), sub(c, a)))
    }

    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Some((lo, hi))
    }

    /// Signed enclosed volume by the divergence theorem.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|v| self.vertices[v]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Drops vertices no triangle references and renumbers.
    pub fn compact(&self) -> TriMesh {
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut out = TriMesh::default();
        for tri in &self.triangles {
            let mut t = [0; 3];
            for (k, &v) in tri.iter().enumerate() {
                if map[v] == usize::MAX {
                    map[v] = out.vertices.len();
                    out.vertices.push(self.vertices[v]);
                    out.midpoint.push(self.midpoint.get(v).copied().unwrap_or(false));
                }
                t[k] = map[v];
            }
            out.triangles.push(t);
        }
        out
    }

    pub fn to_obj(&self) -> String {
        write_obj_string(&self.vertices, self.triangles.iter().map(|t| &t[..]))
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    /// Reads `v` and `f` records; polygons are fan-triangulated.
    pub fn from_obj_str(text: &str) -> Result<TriMesh> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let mut p = [0.0; 3];
                    for x in p.iter_mut() {
                        let tok = it.next().ok_or_else(|| Error::Parse(format!("line {}: short vertex", ln + 1)))?;
                        *x = tok
                            .parse()
                            .map_err(|_| Error::Parse(format!("line {}: bad coordinate {tok:?}", ln + 1)))?;
                    }
                    vertices.push(p);
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for tok in it {
                        let head = tok.split('/').next().unwrap_or("");
                        let i: i64 = head
                            .parse()
                            .map_err(|_| Error::Parse(format!("line {}: bad face index {tok:?}", ln + 1)))?;
                        let v = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        if v < 0 {
                            return Err(Error::Parse(format!("line {}: face index {i} out of range", ln + 1)));
                        }
                        idx.push(v as usize);
                    }
                    if idx.len() < 3 {
                        return Err(Error::Parse(format!("line {}: face with {} vertices", ln + 1, idx.len())));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let m = TriMesh::new(vertices, triangles);
        m.validate()?;
        Ok(m)
    }

    pub fn read_obj(path: impl AsRef<Path>) -> Result<TriMesh> {
        Self::from_obj_str(&std::fs::read_to_string(path)?)
    }
}

/// OBJ text with 1-based faces and 9 significant digits per coordinate.
pub fn write_obj_string<'a>(vertices: &[[f64; 3]], faces: impl Iterator<Item = &'a [usize]>) -> String {
    let mut s = String::new();
    for p in vertices {
        let _ = writeln!(s, "v {} {} {}", fmt_g9(p[0]), fmt_g9(p[1]), fmt_g9(p[2]));
    }
    for f in faces {
        s.push('f');
        for &v in f {
            let _ = write!(s, " {}", v + 1);
        }
        s.push('\n');
    }
    s
}

/// `%.9g`-style formatting.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mant.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[inline]
pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: [f64; 3], c: f64) -> [f64; 3] {
    [a[0] * c, a[1] * c, a[2] * c]
}

#[inline]
pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        [0.0; 3]
    }
}
