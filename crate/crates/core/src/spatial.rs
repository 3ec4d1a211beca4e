//! Bounding volume hierarchy over triangles: closest point, ray parity,
//! winding number and box overlap queries.

use crate::mesh::{cross, dot, norm, sub, TriMesh};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Aabb {
    pub fn empty() -> Self {
        Self { lo: [f64::INFINITY; 3], hi: [f64::NEG_INFINITY; 3] }
    }

    pub fn grow(&mut self, p: [f64; 3]) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }

    pub fn union(&mut self, o: &Aabb) {
        self.grow(o.lo);
        self.grow(o.hi);
    }

    pub fn overlaps(&self, o: &Aabb) -> bool {
        (0..3).all(|k| self.lo[k] <= o.hi[k] && o.lo[k] <= self.hi[k])
    }

    pub fn dist_sq(&self, p: [f64; 3]) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let e = (self.lo[k] - p[k]).max(0.0).max(p[k] - self.hi[k]);
            d += e * e;
        }
        d
    }

    fn ray_hits(&self, o: [f64; 3], inv: [f64; 3]) -> bool {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            let a = (self.lo[k] - o[k]) * inv[k];
            let b = (self.hi[k] - o[k]) * inv[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        t0 <= t1
    }
}

#[derive(Clone, Debug)]
struct Node {
    bbox: Aabb,
    /// Leaf: `start..start+count` into `order`; inner: children `left`, `left+1`.
    start: u32,
    count: u32,
    left: u32,
}

/// Result of a closest-point query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Closest {
    pub dist_sq: f64,
    pub triangle: usize,
    pub point: [f64; 3],
    /// Barycentric weights of `point` in the triangle's corners.
    pub bary: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    tris: Vec<[[f64; 3]; 3]>,
}

const LEAF: usize = 4;

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let tris: Vec<[[f64; 3]; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        Self::from_triangles(tris)
    }

    pub fn from_triangles(tris: Vec<[[f64; 3]; 3]>) -> Self {
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let cents: Vec<[f64; 3]> =
            tris.iter().map(|t| [0, 1, 2].map(|k| (t[0][k] + t[1][k] + t[2][k]) / 3.0)).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF + 1);
        nodes.push(Node { bbox: Aabb::empty(), start: 0, count: 0, left: 0 });
        if !tris.is_empty() {
            Self::split(&mut nodes, 0, &mut order, 0, tris.len(), &tris, &cents);
        }
        Self { nodes, order, tris }
    }

    fn split(
        nodes: &mut Vec<Node>,
        ni: usize,
        order: &mut [u32],
        start: usize,
        end: usize,
        tris: &[[[f64; 3]; 3]],
        cents: &[[f64; 3]],
    ) {
        let mut bbox = Aabb::empty();
        let mut cb = Aabb::empty();
        for &t in &order[start..end] {
            for p in &tris[t as usize] {
                bbox.grow(*p);
            }
            cb.grow(cents[t as usize]);
        }
        nodes[ni].bbox = bbox;
        if end - start <= LEAF {
            nodes[ni].start = start as u32;
            nodes[ni].count = (end - start) as u32;
            return;
        }
        let ext = [0, 1, 2].map(|k| cb.hi[k] - cb.lo[k]);
        let axis = (0..3).max_by(|&a, &b| ext[a].total_cmp(&ext[b])).unwrap_or(0);
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            cents[a as usize][axis].total_cmp(&cents[b as usize][axis])
        });
        let left = nodes.len();
        nodes.push(Node { bbox: Aabb::empty(), start: 0, count: 0, left: 0 });
        nodes.push(Node { bbox: Aabb::empty(), start: 0, count: 0, left: 0 });
        nodes[ni].left = left as u32;
        Self::split(nodes, left, order, start, mid, tris, cents);
        Self::split(nodes, left + 1, order, mid, end, tris, cents);
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        self.tris[t]
    }

    pub fn closest(&self, p: [f64; 3]) -> Option<Closest> {
        if self.tris.is_empty() {
            return None;
        }
        let mut best: Option<Closest> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let n = &self.nodes[ni];
            let bound = best.map_or(f64::INFINITY, |b| b.dist_sq);
            if n.bbox.dist_sq(p) > bound {
                continue;
            }
            if n.count > 0 {
                for &t in &self.order[n.start as usize..(n.start + n.count) as usize] {
                    let (q, bary) = closest_on_triangle(p, &self.tris[t as usize]);
                    let d = sub(p, q);
                    let ds = dot(d, d);
                    let better = match best {
                        None => true,
                        Some(b) => ds < b.dist_sq || (ds == b.dist_sq && (t as usize) < b.triangle),
                    };
                    if better {
                        best = Some(Closest { dist_sq: ds, triangle: t as usize, point: q, bary });
                    }
                }
            } else {
                let (l, r) = (n.left as usize, n.left as usize + 1);
                let (dl, dr) = (self.nodes[l].bbox.dist_sq(p), self.nodes[r].bbox.dist_sq(p));
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }

    /// Triangles whose boxes overlap `b`.
    pub fn overlapping(&self, b: &Aabb, out: &mut Vec<usize>) {
        out.clear();
        if self.tris.is_empty() {
            return;
        }
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let n = &self.nodes[ni];
            if !n.bbox.overlaps(b) {
                continue;
            }
            if n.count > 0 {
                for &t in &self.order[n.start as usize..(n.start + n.count) as usize] {
                    let mut tb = Aabb::empty();
                    for q in &self.tris[t as usize] {
                        tb.grow(*q);
                    }
                    if tb.overlaps(b) {
                        out.push(t as usize);
                    }
                }
            } else {
                stack.push(n.left as usize);
                stack.push(n.left as usize + 1);
            }
        }
    }

    /// Number of triangles hit by the ray, or `None` when a hit is too close
    /// to a triangle edge to count reliably.
    pub fn ray_crossings(&self, o: [f64; 3], dir: [f64; 3]) -> Option<usize> {
        if self.tris.is_empty() {
            return Some(0);
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut hits = 0;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let n = &self.nodes[ni];
            if !n.bbox.ray_hits(o, inv) {
                continue;
            }
            if n.count > 0 {
                for &t in &self.order[n.start as usize..(n.start + n.count) as usize] {
                    match ray_triangle(o, dir, &self.tris[t as usize]) {
                        RayHit::Miss => {}
                        RayHit::Hit => hits += 1,
                        RayHit::Unsure => return None,
                    }
                }
            } else {
                stack.push(n.left as usize);
                stack.push(n.left as usize + 1);
            }
        }
        Some(hits)
    }

    /// Inside test by ray parity, trying several fixed directions until one
    /// avoids grazing hits.
    pub fn inside_by_parity(&self, p: [f64; 3]) -> Option<bool> {
        const DIRS: [[f64; 3]; 6] = [
            [0.577_350_3, 0.577_350_2, 0.577_350_3],
            [-0.267_261_2, 0.534_522_5, 0.801_783_7],
            [0.912_870_9, -0.182_574_2, 0.365_148_4],
            [-0.408_248_3, -0.408_248_3, 0.816_496_6],
            [0.123_091_5, 0.984_731_9, -0.123_091_5],
            [-0.707_106_8, 0.101_015_3, -0.699_854_0],
        ];
        DIRS.iter().find_map(|&d| self.ray_crossings(p, d)).map(|h| h % 2 == 1)
    }

    /// Generalized winding number (solid angle sum / 4 pi).
    pub fn winding_number(&self, p: [f64; 3]) -> f64 {
        let mut w = 0.0;
        for t in &self.tris {
            let a = sub(t[0], p);
            let b = sub(t[1], p);
            let c = sub(t[2], p);
            let (la, lb, lc) = (norm(a), norm(b), norm(c));
            let num = dot(a, cross(b, c));
            let den = la * lb * lc + dot(a, b) * lc + dot(b, c) * la + dot(c, a) * lb;
            w += 2.0 * num.atan2(den);
        }
        w / (4.0 * std::f64::consts::PI)
    }
}

enum RayHit {
    Miss,
    Hit,
    Unsure,
}

fn ray_triangle(o: [f64; 3], d: [f64; 3], t: &[[f64; 3]; 3]) -> RayHit {
    const EPS: f64 = 1e-10;
    let e1 = sub(t[1], t[0]);
    let e2 = sub(t[2], t[0]);
    let pv = cross(d, e2);
    let det = dot(e1, pv);
    let scale = norm(e1) * norm(e2);
    if det.abs() <= 1e-14 * scale {
        return RayHit::Miss;
    }
    let inv = 1.0 / det;
    let tv = sub(o, t[0]);
    let u = dot(tv, pv) * inv;
    let qv = cross(tv, e1);
    let v = dot(d, qv) * inv;
    let s = dot(e2, qv) * inv;
    if u < -EPS || v < -EPS || u + v > 1.0 + EPS || s < -EPS {
        return RayHit::Miss;
    }
    if u < EPS || v < EPS || u + v > 1.0 - EPS || s < EPS {
        return RayHit::Unsure;
    }
    RayHit::Hit
}

/// Closest point on a triangle and its barycentric weights.
pub fn closest_on_triangle(p: [f64; 3], t: &[[f64; 3]; 3]) -> ([f64; 3], [f64; 3]) {
    let [a, b, c] = *t;
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (lerp(a, ab, v), [1.0 - v, v, 0.0]);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (lerp(a, ac, w), [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (lerp(b, sub(c, b), w), [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let q = [0, 1, 2].map(|k| a[k] + ab[k] * v + ac[k] * w);
    (q, [1.0 - v - w, v, w])
}

#[inline]
fn lerp(a: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + d[0] * t, a[1] + d[1] * t, a[2] + d[2] * t]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube() -> TriMesh {
        let v: Vec<[f64; 3]> =
            (0..8).map(|c| [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64]).collect();
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let mut t = Vec::new();
        for q in quads {
            t.push([q[0], q[1], q[2]]);
            t.push([q[0], q[2], q[3]]);
        }
        TriMesh::new(v, t)
    }

    #[test]
    fn closest_point_matches_brute_force() {
        let m = cube();
        let bvh = Bvh::build(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = [0, 1, 2].map(|_| rng.random_range(-1.0..2.0));
            let c = bvh.closest(p).unwrap();
            let brute = (0..m.triangles.len())
                .map(|t| {
                    let (q, _) = closest_on_triangle(p, &m.triangle(t));
                    dot(sub(p, q), sub(p, q))
                })
                .fold(f64::INFINITY, f64::min);
            assert!((c.dist_sq - brute).abs() < 1e-12);
            let tri = m.triangle(c.triangle);
            let rebuilt = [0, 1, 2].map(|k| (0..3).map(|i| c.bary[i] * tri[i][k]).sum::<f64>());
            assert!(sub(rebuilt, c.point).iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn parity_and_winding_agree_on_a_cube() {
        let m = cube();
        let bvh = Bvh::build(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let p = [0, 1, 2].map(|_| rng.random_range(-0.5..1.5));
            let truth = p.iter().all(|&x| (0.0..1.0).contains(&x));
            assert_eq!(bvh.inside_by_parity(p), Some(truth));
            let w = bvh.winding_number(p);
            assert!((w - if truth { 1.0 } else { 0.0 }).abs() < 1e-9, "{w}");
        }
    }

    #[test]
    fn overlap_query_finds_touching_boxes() {
        let bvh = Bvh::build(&cube());
        let mut out = Vec::new();
        bvh.overlapping(&Aabb { lo: [0.9, 0.9, 0.9], hi: [2.0, 2.0, 2.0] }, &mut out);
        assert_eq!(out.len(), 6);
        bvh.overlapping(&Aabb { lo: [1.5; 3], hi: [2.0; 3] }, &mut out);
        assert!(out.is_empty());
    }
}
