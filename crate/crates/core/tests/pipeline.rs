//! End-to-end checks across targets, extraction, meshes and metrics.

use flexicubes::extract::{extract_quads, split_final, FlexParams};
use flexicubes::grid::ScalarGrid;
use flexicubes::mesh::TriMesh;
use flexicubes::meshcheck::check_combinatorics;
use flexicubes::metrics::{metrics_between, MetricConfig};
use flexicubes::spatial::Bvh;
use flexicubes::tables::DmcTables;
use flexicubes::target::{Sdf, TargetShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_cube() -> TriMesh {
    let v: Vec<[f64; 3]> = (0..8).map(|c| [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64]).collect();
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let t = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    TriMesh::new(v, t)
}

#[test]
fn cube_obj_normalizes_to_the_domain_extent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cube.obj");
    unit_cube().write_obj(&path).unwrap();
    let t = TargetShape::load_obj(&path).unwrap();
    let (lo, hi) = t.mesh.bounds().unwrap();
    for k in 0..3 {
        approx::assert_abs_diff_eq!(hi[k] - lo[k], 1.8, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(hi[k] + lo[k], 0.0, epsilon = 1e-12);
    }
    approx::assert_abs_diff_eq!(t.sdf([0.0; 3]), -0.9, epsilon = 1e-12);
    approx::assert_abs_diff_eq!(t.sdf([1.0, 0.0, 0.0]), 0.1, epsilon = 1e-12);
}

#[test]
fn normalized_mesh_loads_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("torus.obj");
    let once = TargetShape::builtin("torus").unwrap();
    let normalized = flexicubes::target::normalize_mesh(&once.mesh);
    normalized.write_obj(&path).unwrap();
    let loaded = TargetShape::load_obj(&path).unwrap();
    for (a, b) in normalized.vertices.iter().zip(&loaded.mesh.vertices) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-8);
        }
    }
}

#[test]
fn mesh_target_signs_agree_with_ray_parity() {
    let t = TargetShape::from_mesh(TargetShape::builtin("box_minus_sphere").unwrap().mesh).unwrap();
    let bvh = Bvh::build(&t.mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rays = 0;
    while rays < 1000 {
        let p = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        let d = flexicubes::mesh::normalize([0, 1, 2].map(|_| rng.random_range(-1.0..1.0)));
        let Some(hits) = bvh.ray_crossings(p, d) else { continue };
        if t.sdf(p).abs() < 1e-6 {
            continue;
        }
        assert_eq!(hits % 2 == 1, t.sdf(p) < 0.0, "point {p:?} direction {d:?}");
        rays += 1;
    }
}

#[test]
fn torus_extraction_has_genus_one() {
    let tables = DmcTables::build().unwrap();
    let t = TargetShape::builtin("torus").unwrap();
    let g = ScalarGrid::from_fn([24; 3], [-1.0; 3], 2.0 / 24.0, |p| t.sdf(p)).unwrap();
    let p = FlexParams::new(g.num_cells());
    let m = split_final(&extract_quads(&g, &p, &tables).unwrap(), &p);
    let r = check_combinatorics(&m).unwrap();
    assert!(r.is_watertight());
    assert_eq!(r.euler, 0);
}

#[test]
fn every_builtin_extracts_a_closed_surface() {
    let tables = DmcTables::build().unwrap();
    for name in Sdf::BUILTINS {
        let t = TargetShape::builtin(name).unwrap();
        let g = ScalarGrid::from_fn([20; 3], [-1.0; 3], 0.1, |p| t.sdf(p)).unwrap();
        let p = FlexParams::new(g.num_cells());
        let m = split_final(&extract_quads(&g, &p, &tables).unwrap(), &p);
        let r = check_combinatorics(&m).unwrap();
        assert!(r.is_watertight(), "{name}: {r:?}");
        assert!(m.signed_volume() > 0.0, "{name}");
    }
}

#[test]
fn a_mesh_compared_with_itself_scores_perfectly() {
    let t = TargetShape::builtin("wedge_union").unwrap();
    let r = metrics_between(&t.mesh, &t.mesh, &MetricConfig { samples: 20_000, ..Default::default() }).unwrap();
    assert!(r.f1 > 0.999);
    assert!(r.cd < 1e-3);
}
