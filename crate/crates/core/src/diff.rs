//! Finite-difference verification of tape gradients.
//!
//! A [`Scene`] owns raw parameters split in the five groups and records an
//! objective on demand. [`grad_check`] compares reverse-mode gradients with
//! central differences over randomly chosen parameters. Draws whose
//! perturbation changes the objective's fingerprint (sign masks, closest
//! triangles, branch choices) straddle a discontinuity and are skipped.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{grid_topology, FlexParams};
use crate::grid::ScalarGrid;
use crate::objectives::{flex_objective, lattice_edges, sign_change_edges, LossWeights, Objective, ObjectiveInputs};
use crate::params::{Binder, Group, GroupVecs};
use crate::tables::DmcTables;
use crate::tape::Tape;
use crate::target::TargetShape;

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// A recorded objective reduced to what the checker needs.
pub struct Recorded {
    pub tape: Tape,
    pub binder: Binder,
    pub objective: Objective,
}

pub trait Scene {
    fn group_sizes(&self) -> [usize; 5];
    fn get(&self, g: Group, i: usize) -> f64;
    fn set(&mut self, g: Group, i: usize, x: f64);
    fn record(&self) -> Result<Recorded>;
}

/// Backward pass returning one gradient vector per group.
pub fn backward(rec: &Recorded) -> Result<GroupVecs> {
    let grad = rec.tape.backward(rec.objective.total)?;
    Ok(rec.binder.gradients(&grad))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub rejected: usize,
    pub max_rel_err: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl GradReport {
    fn empty(step: f64, tolerance: f64) -> Self {
        Self {
            step,
            tolerance,
            groups: Group::ALL.iter().map(|g| GroupReport { group: g.name().into(), ..Default::default() }).collect(),
            passed: true,
            ..Default::default()
        }
    }

    fn merge(&mut self, o: &GradReport) {
        self.trials += o.trials;
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
        for (a, b) in self.groups.iter_mut().zip(&o.groups) {
            a.checked += b.checked;
            a.rejected += b.rejected;
            a.max_rel_err = a.max_rel_err.max(b.max_rel_err);
            a.grad_norm = a.grad_norm.max(b.grad_norm);
        }
        self.passed = self.max_rel_err < self.tolerance;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub per_group: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, per_group: 20, tolerance: 1e-4 }
    }
}

/// Picks up to `k` indices, preferring those with a nonzero gradient.
fn choose(grad: &[f64], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let (mut live, mut dead): (Vec<usize>, Vec<usize>) = (0..grad.len()).partition(|&i| grad[i] != 0.0);
    live.shuffle(rng);
    dead.shuffle(rng);
    live.into_iter().chain(dead).take(k).collect()
}

/// Central-difference derivative along one parameter, or `None` when either
/// side changes the fingerprint.
pub fn central_difference<S: Scene + ?Sized>(scene: &mut S, base: &Objective, g: Group, i: usize, h: f64) -> Result<Option<f64>> {
    let x0 = scene.get(g, i);
    scene.set(g, i, x0 + h);
    let plus = scene.record();
    scene.set(g, i, x0 - h);
    let minus = scene.record();
    scene.set(g, i, x0);
    let (plus, minus) = (plus?, minus?);
    let same = |r: &Recorded| r.objective.fingerprint == base.fingerprint && r.objective.parts.len() == base.parts.len();
    if !same(&plus) || !same(&minus) {
        return Ok(None);
    }
    let mut d = 0.0;
    for (a, b) in plus.objective.parts.iter().zip(&minus.objective.parts) {
        d += a.1 * (plus.tape.value(a.0) - minus.tape.value(b.0));
    }
    Ok(Some(d / (2.0 * h)))
}

/// One trial over the scene's current parameters.
pub fn grad_check<S: Scene + ?Sized>(scene: &mut S, cfg: &GradCheckConfig, rng: &mut impl Rng) -> Result<GradReport> {
    let base = scene.record()?;
    let grads = backward(&base)?;
    let mut report = GradReport::empty(cfg.step, cfg.tolerance);
    report.trials = 1;
    for (gi, &g) in Group::ALL.iter().enumerate() {
        let grad = grads.get(g);
        let gr = &mut report.groups[gi];
        gr.grad_norm = grads.norm(g);
        for i in choose(grad, cfg.per_group, rng) {
            match central_difference(scene, &base.objective, g, i, cfg.step)? {
                Some(fd) => {
                    let e = rel_err(grad[i], fd);
                    if e >= cfg.tolerance {
                        log::debug!("{} {i}: analytic {} fd {fd} rel {e:.3e}", g.name(), grad[i]);
                    }
                    gr.checked += 1;
                    gr.max_rel_err = gr.max_rel_err.max(e);
                }
                None => gr.rejected += 1,
            }
        }
    }
    report.max_rel_err = report.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

/// A flexible extraction on a uniform grid with fixed per-trial samples.
pub struct GridScene {
    pub grid: ScalarGrid,
    pub params: FlexParams,
    pub target: TargetShape,
    pub weights: LossWeights,
    pub w_sign: f64,
    pub surface_points: Vec<[f64; 3]>,
    pub sdf_queries: Vec<([f64; 3], f64)>,
    pub mesh_samples: usize,
    pub sample_seed: u64,
    pub tables: DmcTables,
}

impl GridScene {
    /// Random grid around a sphere of random radius with noisy sdf values,
    /// random deformations and random flexible weights.
    pub fn random(res: usize, target: TargetShape, weights: LossWeights, tables: DmcTables, rng: &mut impl Rng) -> Result<Self> {
        let mut grid = ScalarGrid::unit_domain(res)?;
        let r = rng.random_range(0.35..0.7);
        let h = grid.spacing;
        for v in 0..grid.num_vertices() {
            let p = grid.lattice_position(v);
            let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r;
            grid.sdf[v] = d + rng.random_range(-0.3 * h..0.3 * h);
            grid.deform_raw[v] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        }
        let mut params = FlexParams::new(grid.num_cells());
        for c in 0..params.num_cells() {
            params.alpha_raw[c] = [0; 8].map(|_| rng.random_range(-1.0..1.0));
            params.beta_raw[c] = [0; 12].map(|_| rng.random_range(-1.0..1.0));
            params.gamma_raw[c] = rng.random_range(-1.0..1.0);
        }
        let (surface_points, sdf_queries) = ObjectiveInputs::draw_samples(&target, 64, 64, 1.0, rng);
        Ok(Self {
            grid,
            params,
            target,
            w_sign: weights.sign_start,
            weights,
            surface_points,
            sdf_queries,
            mesh_samples: 128,
            sample_seed: rng.random(),
            tables,
        })
    }

    pub fn inputs(&self) -> ObjectiveInputs<'_> {
        ObjectiveInputs {
            target: &self.target,
            weights: &self.weights,
            w_sign: self.w_sign,
            surface_points: &self.surface_points,
            sdf_queries: &self.sdf_queries,
            mesh_samples: self.mesh_samples,
            sample_seed: self.sample_seed,
        }
    }
}

impl Scene for GridScene {
    fn group_sizes(&self) -> [usize; 5] {
        let n = self.params.num_cells();
        [self.grid.num_vertices(), 3 * self.grid.num_vertices(), 8 * n, 12 * n, n]
    }

    fn get(&self, g: Group, i: usize) -> f64 {
        match g {
            Group::Sdf => self.grid.sdf[i],
            Group::Deform => self.grid.deform_raw[i / 3][i % 3],
            Group::Alpha => self.params.alpha_raw[i / 8][i % 8],
            Group::Beta => self.params.beta_raw[i / 12][i % 12],
            Group::Gamma => self.params.gamma_raw[i],
        }
    }

    fn set(&mut self, g: Group, i: usize, x: f64) {
        match g {
            Group::Sdf => self.grid.sdf[i] = x,
            Group::Deform => self.grid.deform_raw[i / 3][i % 3] = x,
            Group::Alpha => self.params.alpha_raw[i / 8][i % 8] = x,
            Group::Beta => self.params.beta_raw[i / 12][i % 12] = x,
            Group::Gamma => self.params.gamma_raw[i] = x,
        }
    }

    fn record(&self) -> Result<Recorded> {
        let q = grid_topology(&self.grid, &self.tables)?;
        let edges = sign_change_edges(&self.grid, lattice_edges(&self.grid));
        let mut tape = Tape::new();
        let mut binder = Binder::new(self.group_sizes());
        let objective = flex_objective(&mut tape, &mut binder, &self.grid, &self.params, &q, &edges, &self.inputs());
        if !tape.value(objective.total).is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        Ok(Recorded { tape, binder, objective })
    }
}

/// Runs `trials` independent random grid scenes and merges their reports.
pub fn grid_grad_check(res: usize, trials: usize, weights: &LossWeights, cfg: &GradCheckConfig, seed: u64) -> Result<GradReport> {
    let tables = DmcTables::build()?;
    let target = TargetShape::builtin("sphere")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradReport::empty(cfg.step, cfg.tolerance);
    for _ in 0..trials {
        let mut scene = GridScene::random(res, target.clone(), weights.clone(), tables.clone(), &mut rng)?;
        let r = grad_check(&mut scene, cfg, &mut rng)?;
        total.merge(&r);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::edge_crossing_var;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((rel_err(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-15);
    }

    #[test]
    fn crossing_derivative_matches_closed_form() {
        let (xi, xj, si, sj) = ([0.1, 0.2, 0.3], [0.9, 0.4, 0.3], -0.3, 0.7);
        let mut tape = Tape::new();
        let a = tape.constant3(xi);
        let b = tape.constant3(xj);
        let wi = tape.leaf(si);
        let wj = tape.leaf(sj);
        let u = edge_crossing_var(&mut tape, a, b, wi, wj);
        let e = [xj[0] - xi[0], xj[1] - xi[1], xj[2] - xi[2]];
        let n = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        let dir = e.map(|x| x / n);
        let terms: Vec<_> = (0..3).map(|k| (u[k], dir[k])).collect();
        let loss = tape.lincomb(&terms);
        let g = tape.backward(loss).unwrap();
        // u = (sj xi - si xj)/(sj - si); along the edge u = xi + t e with
        // t = -si/(sj - si), so d(u.e^)/dsi = n * d t/dsi = -n sj/(sj-si)^2
        let d = sj - si;
        assert!((g.wrt(wi) - (-n * sj / (d * d))).abs() < 1e-12);
        assert!((g.wrt(wj) - (n * si / (d * d))).abs() < 1e-12);
    }

    #[test]
    fn single_vertex_loss_is_one_hot() {
        let grid = ScalarGrid::unit_domain(2).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new([grid.num_vertices(), 0, 0, 0, 0]);
        let s = binder.bind(&mut tape, Group::Sdf, 5, grid.sdf[5]);
        let g = tape.backward(s).unwrap();
        let v = binder.gradient(&g, Group::Sdf);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(v[5], 1.0);
    }

    #[test]
    fn dev_loss_matches_finite_differences() {
        let w = LossWeights { surface: 0.0, depth: 0.0, sdf: 0.0, dev: 1.0, sign_start: 0.0, sign_end: 0.0, edge: 0.0, developable: 0.0 };
        let r = grid_grad_check(4, 3, &w, &GradCheckConfig::default(), 11).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.groups.iter().map(|g| g.checked).sum::<usize>() > 100);
    }

    #[test]
    fn each_term_matches_finite_differences() {
        let zero = LossWeights { surface: 0.0, depth: 0.0, sdf: 0.0, dev: 0.0, sign_start: 0.0, sign_end: 0.0, edge: 0.0, developable: 0.0 };
        let cases = [
            LossWeights { surface: 1.0, ..zero.clone() },
            LossWeights { depth: 1.0, ..zero.clone() },
            LossWeights { sdf: 1.0, ..zero.clone() },
            LossWeights { sign_start: 1.0, ..zero.clone() },
            LossWeights { edge: 1.0, ..zero.clone() },
            LossWeights { developable: 1.0, ..zero.clone() },
        ];
        for (k, w) in cases.iter().enumerate() {
            let r = grid_grad_check(4, 2, w, &GradCheckConfig::default(), 100 + k as u64).unwrap();
            assert!(r.passed, "case {k}: {r:#?}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let w = LossWeights { surface: 0.0, depth: 0.0, sdf: 0.0, dev: 0.0, sign_start: 0.0, sign_end: 0.0, edge: 0.0, developable: 0.0 };
        let r = grid_grad_check(3, 1, &w, &GradCheckConfig::default(), 5).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.groups.iter().all(|g| g.grad_norm == 0.0));
    }

    #[test]
    fn cells_far_from_the_surface_have_zero_gradient() {
        let tables = DmcTables::build().unwrap();
        let target = TargetShape::builtin("sphere").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = GridScene::random(6, target, LossWeights::default(), tables, &mut rng).unwrap();
        let rec = scene.record().unwrap();
        let g = backward(&rec).unwrap();
        let corner_cell = 0;
        assert!((0..8).all(|k| g.get(Group::Alpha)[8 * corner_cell + k] == 0.0));
        assert_eq!(g.get(Group::Gamma)[corner_cell], 0.0);
    }

    #[test]
    fn backward_is_deterministic() {
        let tables = DmcTables::build().unwrap();
        let target = TargetShape::builtin("sphere").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = GridScene::random(4, target, LossWeights::default(), tables, &mut rng).unwrap();
        let rec = scene.record().unwrap();
        let a = backward(&rec).unwrap();
        let b = backward(&rec).unwrap();
        assert_eq!(a, b);
    }
}
