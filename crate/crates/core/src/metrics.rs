//! Evaluation metrics of a reconstructed mesh against a target.
//!
//! Accuracy metrics compare oriented point clouds sampled on both surfaces:
//! Chamfer distance, F-score, their restrictions to sharp-edge points and
//! the share of inaccurate normals. Quality metrics are per-triangle aspect
//! ratio, radius ratio and angles, plus self-intersection and
//! non-manifoldness rates.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{cross, dist, dot, norm, normalize, sub, TriMesh};
use crate::spatial::Bvh;
use crate::meshcheck::check_topology;
use crate::target::{sample_triangle, TargetShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub samples: usize,
    pub f1_threshold: f64,
    /// A point is a sharp-edge point when its normal and the normal of some
    /// neighbor have a dot product below this value.
    pub edge_dot: f64,
    pub edge_neighbors: usize,
    pub normal_angle_deg: f64,
    pub seed: u64,
    pub self_intersections: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            f1_threshold: 0.003,
            edge_dot: 0.2,
            edge_neighbors: 10,
            normal_angle_deg: 5.0,
            seed: 0,
            self_intersections: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub f1: f64,
    /// `None` when either surface has no sharp-edge points.
    pub ecd: Option<f64>,
    pub ef1: Option<f64>,
    pub in5: f64,
    pub ar_gt4_pct: f64,
    pub rr_gt4_pct: f64,
    pub min_angle_lt10_pct: f64,
    pub si_pct: f64,
    pub nv_pct: f64,
    pub ne_pct: f64,
    pub mean_aspect_ratio: f64,
    pub mean_radius_ratio: f64,
    pub mean_min_angle: f64,
    pub mean_max_angle: f64,
    pub triangles: usize,
    pub vertices: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Oriented point cloud.
#[derive(Clone, Debug, Default)]
pub struct Cloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
}

impl Cloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Cloud {
        Cloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: idx.iter().map(|&i| self.normals[i]).collect(),
        }
    }
}

/// Area-weighted samples with the normal of the face each was drawn from.
pub fn sample_mesh(m: &TriMesh, n: usize, rng: &mut impl Rng) -> Result<Cloud> {
    let areas: Vec<f64> = (0..m.triangles.len()).map(|t| m.area(t)).collect();
    let total: f64 = areas.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("mesh has no area to sample".into()));
    }
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cdf.push(acc);
    }
    let mut cloud = Cloud { points: Vec::with_capacity(n), normals: Vec::with_capacity(n) };
    for _ in 0..n {
        let u: f64 = rng.random();
        let t = cdf.partition_point(|&c| c < u).min(areas.len() - 1);
        cloud.points.push(sample_triangle(&m.triangle(t), rng));
        cloud.normals.push(m.normal(t));
    }
    Ok(cloud)
}

pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl PointIndex {
    pub fn new(points: &[[f64; 3]]) -> Result<Self> {
        let tree = ImmutableKdTree::new_from_slice(points).map_err(|e| Error::Degenerate(format!("point index: {e:?}")))?;
        Ok(Self { tree })
    }

    /// Index and distance of the nearest point.
    pub fn nearest(&self, p: [f64; 3]) -> (usize, f64) {
        let r = self.tree.query(&p).nearest_one::<SquaredEuclidean<f64>>().execute();
        (r.item as usize, r.distance.sqrt())
    }

    pub fn nearest_k(&self, p: [f64; 3], k: usize) -> Vec<usize> {
        let k = NonZero::new(k.max(1)).expect("k is positive");
        self.tree.query(&p).nearest_n::<SquaredEuclidean<f64>>(k).execute().into_iter().map(|r| r.item as usize).collect()
    }
}

/// Nearest neighbors in both directions.
struct Matching {
    a_to_b: Vec<(usize, f64)>,
    b_to_a: Vec<(usize, f64)>,
}

fn match_clouds(a: &Cloud, b: &Cloud) -> Result<Matching> {
    let ia = PointIndex::new(&a.points)?;
    let ib = PointIndex::new(&b.points)?;
    Ok(Matching {
        a_to_b: a.points.iter().map(|&p| ib.nearest(p)).collect(),
        b_to_a: b.points.iter().map(|&p| ia.nearest(p)).collect(),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Symmetric Chamfer distance `(mean d(a,B) + mean d(b,A)) / 2` and F-score
/// at `tau`.
fn chamfer_f1(m: &Matching, tau: f64) -> (f64, f64) {
    let cd = 0.5 * (mean(m.a_to_b.iter().map(|x| x.1)) + mean(m.b_to_a.iter().map(|x| x.1)));
    let frac = |v: &[(usize, f64)]| v.iter().filter(|x| x.1 < tau).count() as f64 / v.len().max(1) as f64;
    let (precision, recall) = (frac(&m.a_to_b), frac(&m.b_to_a));
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (cd, f1)
}

/// Indices of sharp-edge points.
pub fn edge_points(c: &Cloud, k: usize, dot_threshold: f64) -> Result<Vec<usize>> {
    if c.is_empty() {
        return Ok(Vec::new());
    }
    let idx = PointIndex::new(&c.points)?;
    Ok((0..c.len())
        .filter(|&i| {
            idx.nearest_k(c.points[i], k + 1)
                .into_iter()
                .filter(|&j| j != i)
                .any(|j| dot(c.normals[i], c.normals[j]) < dot_threshold)
        })
        .collect())
}

pub fn chamfer(a: &Cloud, b: &Cloud, tau: f64) -> Result<(f64, f64)> {
    Ok(chamfer_f1(&match_clouds(a, b)?, tau))
}

/// Aspect ratio `l_max (l0 + l1 + l2) / (4 sqrt(3) A)`; 1 for equilateral.
pub fn aspect_ratio(t: &[[f64; 3]; 3]) -> f64 {
    let l = [dist(t[0], t[1]), dist(t[1], t[2]), dist(t[2], t[0])];
    let a = 0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])));
    let lmax = l[0].max(l[1]).max(l[2]);
    if a <= 0.0 {
        return f64::INFINITY;
    }
    lmax * (l[0] + l[1] + l[2]) / (4.0 * 3f64.sqrt() * a)
}

/// Radius ratio `R / (2 r)`; 1 for equilateral.
pub fn radius_ratio(t: &[[f64; 3]; 3]) -> f64 {
    let l = [dist(t[0], t[1]), dist(t[1], t[2]), dist(t[2], t[0])];
    let a = 0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])));
    if a <= 0.0 {
        return f64::INFINITY;
    }
    let s = 0.5 * (l[0] + l[1] + l[2]);
    let circum = l[0] * l[1] * l[2] / (4.0 * a);
    let inr = a / s;
    circum / (2.0 * inr)
}

/// Interior angles in degrees.
pub fn angles_deg(t: &[[f64; 3]; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| {
        let u = sub(t[(k + 1) % 3], t[k]);
        let v = sub(t[(k + 2) % 3], t[k]);
        let c = dot(u, v) / (norm(u) * norm(v));
        if c.is_finite() {
            c.clamp(-1.0, 1.0).acos().to_degrees()
        } else {
            0.0
        }
    })
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Triangle-quality part of the report.
pub fn quality_metrics(m: &TriMesh, self_intersections: bool) -> Result<MetricReport> {
    let nt = m.triangles.len();
    let (mut ar4, mut rr4, mut a10) = (0, 0, 0);
    let (mut sar, mut srr, mut smin, mut smax) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..nt {
        let tri = m.triangle(t);
        let (ar, rr) = (aspect_ratio(&tri), radius_ratio(&tri));
        let ang = angles_deg(&tri);
        let (mn, mx) = (ang[0].min(ang[1]).min(ang[2]), ang[0].max(ang[1]).max(ang[2]));
        ar4 += (ar > 4.0) as usize;
        rr4 += (rr > 4.0) as usize;
        a10 += (mn < 10.0) as usize;
        sar += ar.min(1e6);
        srr += rr.min(1e6);
        smin += mn;
        smax += mx;
    }
    let topo = if self_intersections { check_topology(m)? } else { crate::meshcheck::check_combinatorics(m)? };
    let nd = nt.max(1) as f64;
    Ok(MetricReport {
        ar_gt4_pct: pct(ar4, nt),
        rr_gt4_pct: pct(rr4, nt),
        min_angle_lt10_pct: pct(a10, nt),
        si_pct: pct(topo.self_intersecting_faces, nt),
        nv_pct: pct(topo.non_manifold_vertices, topo.vertices),
        ne_pct: pct(topo.non_manifold_edges, topo.edges),
        mean_aspect_ratio: sar / nd,
        mean_radius_ratio: srr / nd,
        mean_min_angle: smin / nd,
        mean_max_angle: smax / nd,
        triangles: nt,
        vertices: m.vertices.len(),
        ..Default::default()
    })
}

/// Distance from a point to a reference surface and the surface normal at
/// the closest point.
pub trait Surface {
    fn closest(&self, p: [f64; 3]) -> (f64, [f64; 3]);
}

pub struct MeshSurface<'a> {
    mesh: &'a TriMesh,
    bvh: Bvh,
}

impl<'a> MeshSurface<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        Self { mesh, bvh: Bvh::build(mesh) }
    }
}

impl Surface for MeshSurface<'_> {
    fn closest(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let c = self.bvh.closest(p).expect("mesh is not empty");
        (c.dist_sq.sqrt(), self.mesh.normal(c.triangle))
    }
}

impl Surface for TargetShape {
    fn closest(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        match &self.sdf {
            Some(s) if s.is_exact() => {
                let (d, g) = s.eval_grad(p);
                (d.abs(), normalize(g))
            }
            _ => {
                let c = self.bvh.closest(p).expect("target mesh is not empty");
                (c.dist_sq.sqrt(), self.mesh.normal(c.triangle))
            }
        }
    }
}

/// Full metric suite of `m` against a target.
pub fn metrics(m: &TriMesh, target: &TargetShape, cfg: &MetricConfig) -> Result<MetricReport> {
    if m.is_empty() {
        return Err(Error::Degenerate("cannot evaluate an empty mesh".into()));
    }
    let pred = sample_mesh(m, cfg.samples, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let pairs = target.sample_surface(cfg.samples, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let gt = Cloud { points: pairs.iter().map(|p| p.0).collect(), normals: pairs.iter().map(|p| p.1).collect() };
    compare(m, &pred, target, &gt, cfg)
}

/// Metrics between two meshes, the second playing the target.
pub fn metrics_between(m: &TriMesh, reference: &TriMesh, cfg: &MetricConfig) -> Result<MetricReport> {
    if m.is_empty() || reference.is_empty() {
        return Err(Error::Degenerate("cannot evaluate an empty mesh".into()));
    }
    let pred = sample_mesh(m, cfg.samples, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let gt = sample_mesh(reference, cfg.samples, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    compare(m, &pred, &MeshSurface::new(reference), &gt, cfg)
}

/// Accuracy metrics use point-to-surface distances in both directions, so
/// identical surfaces score exactly zero. Sharp-edge metrics compare the
/// detected edge point sets directly.
fn compare(m: &TriMesh, pred: &Cloud, reference: &dyn Surface, gt: &Cloud, cfg: &MetricConfig) -> Result<MetricReport> {
    let pred_surface = MeshSurface::new(m);
    let to_ref: Vec<(f64, [f64; 3])> = pred.points.iter().map(|&p| reference.closest(p)).collect();
    let to_pred: Vec<f64> = gt.points.iter().map(|&p| pred_surface.closest(p).0).collect();
    let cd = 0.5 * (mean(to_ref.iter().map(|x| x.0)) + mean(to_pred.iter().copied()));
    let precision = to_ref.iter().filter(|x| x.0 < cfg.f1_threshold).count() as f64 / to_ref.len().max(1) as f64;
    let recall = to_pred.iter().filter(|&&d| d < cfg.f1_threshold).count() as f64 / to_pred.len().max(1) as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let cos = cfg.normal_angle_deg.to_radians().cos();
    let bad = pred.normals.iter().zip(&to_ref).filter(|(n, r)| dot(**n, r.1) < cos).count();
    let pe = edge_points(pred, cfg.edge_neighbors, cfg.edge_dot)?;
    let ge = edge_points(gt, cfg.edge_neighbors, cfg.edge_dot)?;
    let (ecd, ef1) = if pe.is_empty() || ge.is_empty() {
        (None, None)
    } else {
        let (e, f) = chamfer(&pred.subset(&pe), &gt.subset(&ge), cfg.f1_threshold)?;
        (Some(e), Some(f))
    };
    let q = quality_metrics(m, cfg.self_intersections)?;
    Ok(MetricReport { cd, f1, ecd, ef1, in5: pct(bad, pred.len()), ..q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::Sdf;

    fn equilateral() -> [[f64; 3]; 3] {
        [[0.0; 3], [1.0, 0.0, 0.0], [0.5, 3f64.sqrt() / 2.0, 0.0]]
    }

    #[test]
    fn equilateral_quality() {
        let t = equilateral();
        assert!((aspect_ratio(&t) - 1.0).abs() < 1e-12);
        assert!((radius_ratio(&t) - 1.0).abs() < 1e-12);
        for a in angles_deg(&t) {
            assert!((a - 60.0).abs() < 1e-9);
        }
    }

    #[test]
    fn right_isoceles_quality() {
        let t = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        // lmax = sqrt 2, perimeter 2 + sqrt 2, area 1/2
        let ar = 2f64.sqrt() * (2.0 + 2f64.sqrt()) / (2.0 * 3f64.sqrt());
        assert!((aspect_ratio(&t) - ar).abs() < 1e-12);
        // R = sqrt2/2, r = (2 - sqrt 2)/2
        let rr = (2f64.sqrt() / 2.0) / (2.0 - 2f64.sqrt());
        assert!((radius_ratio(&t) - rr).abs() < 1e-12);
    }

    #[test]
    fn identical_meshes_score_perfectly() {
        let m = Sdf::Sphere { center: [0.0; 3], radius: 0.6 }.tessellate().unwrap();
        let cfg = MetricConfig { samples: 20_000, self_intersections: false, ..Default::default() };
        let r = metrics_between(&m, &m, &cfg).unwrap();
        assert!(r.cd < 1e-12, "{r:?}");
        assert!(r.f1 > 0.999, "{r:?}");
        assert!(r.in5 < 0.1, "{r:?}");
        assert_eq!(r.ecd, None);
        assert!(r.ne_pct == 0.0 && r.nv_pct == 0.0);
    }

    #[test]
    fn cube_edges_are_detected() {
        let m = Sdf::Box { center: [0.0; 3], half: [0.5; 3], rot: crate::target::rotation_xyz([0.0; 3]) }.tessellate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_mesh(&m, 20_000, &mut rng).unwrap();
        let e = edge_points(&c, 10, 0.2).unwrap();
        assert!(!e.is_empty());
        let near_edge = e.iter().all(|&i| {
            let p = c.points[i];
            let close = p.iter().filter(|x| (x.abs() - 0.5).abs() < 0.05).count();
            close >= 2
        });
        assert!(near_edge);
        assert!(e.len() < c.len() / 5);
    }

    #[test]
    fn chamfer_is_symmetric_and_shift_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Sdf::Sphere { center: [0.0; 3], radius: 0.5 }.tessellate().unwrap();
        let a = sample_mesh(&m, 5000, &mut rng).unwrap();
        let shifted = Cloud { points: a.points.iter().map(|p| [p[0] + 0.1, p[1], p[2]]).collect(), normals: a.normals.clone() };
        let (ab, _) = chamfer(&a, &shifted, 0.003).unwrap();
        let (ba, _) = chamfer(&shifted, &a, 0.003).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab > 0.01);
    }

    #[test]
    fn interpenetrating_triangles_both_count() {
        let m = TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, 0.2, -0.5], [0.3, 0.2, 0.5], [0.2, 0.3, 0.5]],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let q = quality_metrics(&m, true).unwrap();
        assert_eq!(q.si_pct, 100.0);
    }

    #[test]
    fn report_json_keys() {
        let j = MetricReport::default().to_json().unwrap();
        for k in ["cd", "f1", "ecd", "ef1", "in5", "ar_gt4_pct", "rr_gt4_pct", "min_angle_lt10_pct", "si_pct", "nv_pct", "ne_pct"] {
            assert!(j.contains(&format!("\"{k}\"")), "{k}");
        }
    }
}
