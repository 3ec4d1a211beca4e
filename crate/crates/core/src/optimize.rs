//! Adam fitting loop over a uniform grid or an octree.
//!
//! Every iteration extracts a mesh, records the weighted objective on a
//! fresh tape, backpropagates and applies one Adam step. Sampling uses a
//! stream derived from the seed and the iteration number, so a run resumed
//! from a checkpoint continues bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{grid_topology, mc_positions, mc_topology, split_final, FlexParams, QuadMesh, VertexField};
use crate::grid::ScalarGrid;
use crate::mesh::TriMesh;
use crate::objectives::{flex_objective, lattice_edges, mc_objective, sign_change_edges, LossWeights, Objective, ObjectiveInputs, Term};
use crate::octree::{Octree, OctreeSnapshot, OctreeStats};
use crate::params::{Binder, Group, GroupVecs};
use crate::tables::DmcTables;
use crate::target::TargetShape;
use crate::tape::Tape;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Flexible dual marching cubes with all parameter groups.
    Flexi,
    /// Marching cubes baseline; only sdf values and deformations are fitted.
    Mc,
}

impl Mode {
    pub fn groups(self) -> &'static [Group] {
        match self {
            Mode::Flexi => &Group::ALL,
            Mode::Mc => &[Group::Sdf, Group::Deform],
        }
    }
}

/// Second phase with the edge regularizer ramped linearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2 {
    pub steps: usize,
    pub edge_max: f64,
}

impl Default for Phase2 {
    fn default() -> Self {
        Self { steps: 300, edge_max: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctreePolicy {
    pub max_depth: u8,
    /// Leaves whose running loss reaches this value are split.
    pub threshold: f64,
    /// Iterations (before the step) at which refinement runs.
    pub refine_at: Vec<usize>,
}

impl OctreePolicy {
    /// Refinements spread evenly over the first phase, one per level.
    pub fn evenly(max_depth: u8, threshold: f64, iterations: usize) -> Self {
        let n = max_depth as usize;
        let refine_at = (1..=n).map(|k| k * iterations / (n + 1)).collect();
        Self { max_depth, threshold, refine_at }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Level-0 cells per axis over `[-1, 1]^3`.
    pub resolution: usize,
    pub init_radius: f64,
    pub surface_samples: usize,
    pub sdf_samples: usize,
    pub mesh_samples: usize,
    pub mode: Mode,
    pub phase2: Option<Phase2>,
    pub octree: Option<OctreePolicy>,
    /// Abort after this many consecutive empty extractions.
    pub empty_limit: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            resolution: 32,
            init_radius: 0.6,
            surface_samples: 2000,
            sdf_samples: 2000,
            mesh_samples: 2000,
            mode: Mode::Flexi,
            phase2: None,
            octree: None,
            empty_limit: 20,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.lr, self.eps, self.init_radius];
        if pos.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidGrid("learning rate, epsilon and initial radius must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidGrid("Adam betas must lie in [0, 1)".into()));
        }
        if self.resolution == 0 {
            return Err(Error::InvalidGrid("resolution must be positive".into()));
        }
        if self.octree.is_some() && self.mode == Mode::Mc {
            return Err(Error::InvalidGrid("the marching cubes baseline runs on uniform grids only".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.iterations + self.phase2.as_ref().map_or(0, |p| p.steps)
    }

    /// `(w_sign, w_edge)` at global step `iter`.
    pub fn schedule(&self, iter: usize) -> (f64, f64) {
        if iter < self.iterations {
            return (self.weights.sign_at(iter, self.iterations), self.weights.edge);
        }
        let p = self.phase2.as_ref().expect("phase two step without phase two");
        let j = iter - self.iterations;
        let t = if p.steps <= 1 { 1.0 } else { j as f64 / (p.steps - 1) as f64 };
        (self.weights.sign_end, p.edge_max * t)
    }
}

#[derive(Clone, Debug)]
pub enum Field {
    Grid(ScalarGrid),
    Octree(Octree),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FieldSnapshot {
    Grid(ScalarGrid),
    Octree(OctreeSnapshot),
}

impl Field {
    pub fn as_vertex_field(&self) -> &dyn VertexField {
        match self {
            Field::Grid(g) => g,
            Field::Octree(t) => t,
        }
    }

    fn num_vertices(&self) -> usize {
        self.as_vertex_field().num_vertices()
    }

    fn sdf_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Field::Grid(g) => &mut g.sdf,
            Field::Octree(t) => &mut t.sdf,
        }
    }

    fn deform_mut(&mut self) -> &mut Vec<[f64; 3]> {
        match self {
            Field::Grid(g) => &mut g.deform_raw,
            Field::Octree(t) => &mut t.deform_raw,
        }
    }

    fn snapshot(&self) -> FieldSnapshot {
        match self {
            Field::Grid(g) => FieldSnapshot::Grid(g.clone()),
            Field::Octree(t) => FieldSnapshot::Octree(t.snapshot()),
        }
    }

    fn from_snapshot(s: &FieldSnapshot) -> Result<Self> {
        Ok(match s {
            FieldSnapshot::Grid(g) => {
                g.validate()?;
                Field::Grid(g.clone())
            }
            FieldSnapshot::Octree(t) => Field::Octree(Octree::from_snapshot(t)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: GroupVecs,
    pub v: GroupVecs,
    pub t: u64,
}

impl Adam {
    pub fn new(sizes: [usize; 5]) -> Self {
        Self { m: GroupVecs::zeros_like(sizes), v: GroupVecs::zeros_like(sizes), t: 0 }
    }

    /// One bias-corrected update of `x` for group `g`. `t` must already be
    /// incremented for this step.
    pub fn update(&mut self, g: Group, x: &mut [f64], grad: &[f64], cfg: &FitConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let m = self.m.get_mut(g);
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        }
        let v = self.v.get_mut(g);
        for i in 0..x.len() {
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        }
        let (m, v) = (self.m.get(g), self.v.get(g));
        for i in 0..x.len() {
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            x[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub phase: u8,
    /// Unweighted term values in [`Term::ALL`] order; inactive terms are 0.
    pub terms: [f64; 7],
    pub total: f64,
    pub weights: [f64; 6],
    pub lr: f64,
    pub faces: usize,
}

pub const CSV_HEADER: &str = "iter,phase,surface,depth,sdf,dev,sign,edge,developable,total,w_surface,w_depth,w_sdf,w_dev,w_sign,w_edge,lr,faces";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.iter, self.phase);
        for x in self.terms.iter().chain(std::iter::once(&self.total)).chain(&self.weights) {
            s.push_str(&format!(",{x}"));
        }
        s.push_str(&format!(",{},{}", self.lr, self.faces));
        s
    }
}

/// Rows of a loss CSV produced by [`FitState::history_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("unexpected loss log header".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 18 {
                return Err(Error::Parse(format!("loss log line {} has {} fields", n + 2, f.len())));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", n + 2)));
            let int = |i: usize| f[i].parse::<usize>().map_err(|e| Error::Parse(format!("line {}: {e}", n + 2)));
            let mut terms = [0.0; 7];
            for (k, t) in terms.iter_mut().enumerate() {
                *t = num(2 + k)?;
            }
            let mut weights = [0.0; 6];
            for (k, w) in weights.iter_mut().enumerate() {
                *w = num(10 + k)?;
            }
            Ok(LogRow { iter: int(0)?, phase: int(1)? as u8, terms, total: num(9)?, weights, lr: num(16)?, faces: int(17)? })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FitState {
    pub field: Field,
    pub params: FlexParams,
    pub adam: Adam,
    /// Global step count, phase two included.
    pub iter: usize,
    pub history: Vec<LogRow>,
    /// Running per-leaf loss used for octree refinement.
    pub cell_loss: Vec<f64>,
    pub empty_streak: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub field: FieldSnapshot,
    pub params: FlexParams,
    pub adam: Adam,
    pub iter: usize,
    pub history: Vec<LogRow>,
    pub cell_loss: Vec<f64>,
    pub empty_streak: usize,
}

/// Sphere of radius `r` at the origin sampled on `[-1, 1]^3`.
pub fn sphere_grid(res: usize, r: f64) -> Result<ScalarGrid> {
    ScalarGrid::from_fn([res; 3], [-1.0; 3], 2.0 / res as f64, |p| {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r
    })
}

impl FitState {
    /// Sphere initialization with all raw parameters at zero.
    pub fn new(cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = sphere_grid(cfg.resolution, cfg.init_radius)?;
        let field = match &cfg.octree {
            None => Field::Grid(grid),
            Some(p) => Field::Octree(Octree::from_grid(&grid, p.max_depth)?),
        };
        Ok(Self::from_field(field))
    }

    pub fn from_field(field: Field) -> Self {
        let cells = match &field {
            Field::Grid(g) => g.num_cells(),
            Field::Octree(t) => t.num_leaves(),
        };
        let params = FlexParams::new(cells);
        let adam = Adam::new(group_sizes(&field, &params));
        Self { field, params, adam, iter: 0, history: Vec::new(), cell_loss: vec![0.0; cells], empty_streak: 0 }
    }

    pub fn group_sizes(&self) -> [usize; 5] {
        group_sizes(&self.field, &self.params)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            field: self.field.snapshot(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            iter: self.iter,
            history: self.history.clone(),
            cell_loss: self.cell_loss.clone(),
            empty_streak: self.empty_streak,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", c.version)));
        }
        let field = Field::from_snapshot(&c.field)?;
        let s = Self {
            field,
            params: c.params.clone(),
            adam: c.adam.clone(),
            iter: c.iter,
            history: c.history.clone(),
            cell_loss: c.cell_loss.clone(),
            empty_streak: c.empty_streak,
        };
        if s.adam.m.sizes() != s.group_sizes() || s.adam.v.sizes() != s.group_sizes() {
            return Err(Error::Structure("checkpoint moments do not match the parameters".into()));
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&c)
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    fn group_mut(&mut self, g: Group) -> GroupSlice<'_> {
        match g {
            Group::Sdf => GroupSlice::Flat(self.field.sdf_mut()),
            Group::Deform => GroupSlice::Vec3(self.field.deform_mut()),
            Group::Alpha => GroupSlice::Arr8(&mut self.params.alpha_raw),
            Group::Beta => GroupSlice::Arr12(&mut self.params.beta_raw),
            Group::Gamma => GroupSlice::Flat(&mut self.params.gamma_raw),
        }
    }

    /// Records the objective at the current parameters for step `iter`.
    pub fn record(&self, cfg: &FitConfig, target: &TargetShape, tables: &DmcTables) -> Result<Recording> {
        let (w_sign, w_edge) = cfg.schedule(self.iter);
        let mut weights = cfg.weights.clone();
        weights.edge = w_edge;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(self.iter as u64);
        let (surface, queries) = ObjectiveInputs::draw_samples(target, cfg.surface_samples, cfg.sdf_samples, 1.0, &mut rng);
        let inputs = ObjectiveInputs {
            target,
            weights: &weights,
            w_sign,
            surface_points: &surface,
            sdf_queries: &queries,
            mesh_samples: cfg.mesh_samples,
            sample_seed: rng.random(),
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new(self.group_sizes());
        let (objective, quads, faces) = match (&self.field, cfg.mode) {
            (Field::Grid(g), Mode::Mc) => {
                let topo = mc_topology(g, tables)?;
                let faces = topo.triangles.len();
                let edges = sign_change_edges(g, lattice_edges(g));
                (mc_objective(&mut tape, &mut binder, g, &topo, &edges, &inputs), None, faces)
            }
            (Field::Grid(g), Mode::Flexi) => {
                let q = grid_topology(g, tables)?;
                let edges = sign_change_edges(g, lattice_edges(g));
                let o = flex_objective(&mut tape, &mut binder, g, &self.params, &q, &edges, &inputs);
                let faces = q.num_faces();
                (o, Some(q), faces)
            }
            (Field::Octree(t), _) => {
                let (q, _) = t.topology(tables)?;
                let edges = t.sign_change_edges();
                let o = flex_objective(&mut tape, &mut binder, t, &self.params, &q, &edges, &inputs);
                let faces = q.num_faces();
                (o, Some(q), faces)
            }
        };
        Ok(Recording { tape, binder, objective, quads, faces, weights, w_sign })
    }

    /// One Adam step. On a non-finite loss or gradient the state is left
    /// untouched and an error is returned.
    pub fn step(&mut self, cfg: &FitConfig, target: &TargetShape, tables: &DmcTables) -> Result<LogRow> {
        let rec = self.record(cfg, target, tables)?;
        let total = rec.tape.value(rec.objective.total);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}", self.iter)));
        }
        let grad = rec.tape.backward(rec.objective.total)?;
        let grads = rec.binder.gradients(&grad);
        for g in cfg.mode.groups() {
            if let Some(i) = grads.get(*g).iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{} gradient {i} at iteration {}", g.name(), self.iter)));
            }
        }
        if rec.faces == 0 {
            self.empty_streak += 1;
            if self.empty_streak > cfg.empty_limit {
                return Err(Error::Degenerate(format!(
                    "extraction empty for {} consecutive iterations (last {})",
                    self.empty_streak, self.iter
                )));
            }
        } else {
            self.empty_streak = 0;
        }

        self.adam.t += 1;
        for &g in cfg.mode.groups() {
            let mut x = self.group_mut(g).to_vec();
            self.adam.update(g, &mut x, grads.get(g), cfg);
            self.group_mut(g).assign(&x);
        }
        if let Field::Octree(t) = &mut self.field {
            t.constrain_sdf();
        }
        if let Some(q) = &rec.quads {
            self.update_cell_loss(q, &rec.objective, target);
        }

        let mut terms = [0.0; 7];
        for (k, t) in Term::ALL.iter().enumerate() {
            terms[k] = rec.objective.term(*t).unwrap_or(0.0);
        }
        let w = &rec.weights;
        let row = LogRow {
            iter: self.iter,
            phase: if self.iter < cfg.iterations { 1 } else { 2 },
            terms,
            total,
            weights: [w.surface, w.depth, w.sdf, w.dev, rec.w_sign, w.edge],
            lr: cfg.lr,
            faces: rec.faces,
        };
        self.history.push(row.clone());
        self.iter += 1;
        Ok(row)
    }

    /// Running average (decay 0.9) of the mean target distance of the dual
    /// vertices each leaf emits.
    fn update_cell_loss(&mut self, q: &QuadMesh, o: &Objective, target: &TargetShape) {
        let n = self.cell_loss.len();
        let mut sum = vec![0.0; n];
        let mut count = vec![0usize; n];
        for (d, dual) in q.duals.iter().enumerate() {
            sum[dual.cell] += target.sdf(o.mesh.vertices[d]).abs();
            count[dual.cell] += 1;
        }
        for c in 0..n {
            if count[c] > 0 {
                let x = sum[c] / count[c] as f64;
                self.cell_loss[c] = 0.9 * self.cell_loss[c] + 0.1 * x;
            }
        }
    }

    /// Splits surface leaves whose running loss reaches `threshold`, then
    /// resets the optimizer moments. Returns the number of leaves split.
    pub fn refine(&mut self, threshold: f64, tables: &DmcTables) -> Result<usize> {
        let Field::Octree(t) = &mut self.field else {
            return Err(Error::Structure("refinement needs an octree".into()));
        };
        let (q, _) = t.topology(tables)?;
        let split: Vec<usize> = q
            .cells
            .iter()
            .enumerate()
            .filter(|&(c, st)| st.first_dual != u32::MAX && self.cell_loss[c] >= threshold && t.leaves[c].level < t.max_depth)
            .map(|(c, _)| c)
            .collect();
        if split.is_empty() {
            if q.cells.iter().enumerate().any(|(c, st)| st.first_dual != u32::MAX && self.cell_loss[c] >= threshold) {
                log::warn!("refinement requested beyond maximum depth {}", t.max_depth);
            }
            return Ok(0);
        }
        let mut marked = vec![false; t.num_leaves()];
        split.iter().for_each(|&c| marked[c] = true);
        let mut loss = Vec::with_capacity(self.cell_loss.len() + 7 * split.len());
        for (c, &m) in marked.iter().enumerate() {
            if m {
                loss.extend([0.0; 8]);
            } else {
                loss.push(self.cell_loss[c]);
            }
        }
        self.params = t.subdivide(&split, &self.params)?;
        t.constrain_sdf();
        self.cell_loss = loss;
        self.adam = Adam::new(group_sizes(&self.field, &self.params));
        Ok(split.len())
    }

    /// Runs the remaining steps, refining at the policy's iterations.
    pub fn run(&mut self, cfg: &FitConfig, target: &TargetShape, tables: &DmcTables) -> Result<()> {
        while self.iter < cfg.total_steps() {
            if let Some(p) = &cfg.octree {
                if p.refine_at.contains(&self.iter) && self.history.last().is_none_or(|r| r.iter + 1 == self.iter) {
                    let n = self.refine(p.threshold, tables)?;
                    log::info!("iteration {}: split {n} leaves", self.iter);
                }
            }
            self.step(cfg, target, tables)?;
        }
        Ok(())
    }

    /// Final mesh: diagonal split for flexible extraction, the plain
    /// marching cubes mesh for the baseline.
    pub fn final_mesh(&self, cfg: &FitConfig, tables: &DmcTables) -> Result<(TriMesh, Option<OctreeStats>)> {
        match (&self.field, cfg.mode) {
            (Field::Grid(g), Mode::Mc) => {
                let topo = mc_topology(g, tables)?;
                Ok((TriMesh::new(mc_positions(g, &topo), topo.triangles), None))
            }
            (Field::Grid(g), Mode::Flexi) => {
                let q = crate::extract::extract_quads(g, &self.params, tables)?;
                Ok((split_final(&q, &self.params), None))
            }
            (Field::Octree(t), _) => {
                let (q, stats) = t.extract(&self.params, tables)?;
                Ok((split_final(&q, &self.params), Some(stats)))
            }
        }
    }

    /// Extracted quad mesh with placed vertices (flexible modes only).
    pub fn quad_mesh(&self, tables: &DmcTables) -> Result<QuadMesh> {
        match &self.field {
            Field::Grid(g) => crate::extract::extract_quads(g, &self.params, tables),
            Field::Octree(t) => Ok(t.extract(&self.params, tables)?.0),
        }
    }
}

/// Tape, bindings and objective of one recorded step.
pub struct Recording {
    pub tape: Tape,
    pub binder: Binder,
    pub objective: Objective,
    pub quads: Option<QuadMesh>,
    pub faces: usize,
    pub weights: LossWeights,
    pub w_sign: f64,
}

fn group_sizes(field: &Field, params: &FlexParams) -> [usize; 5] {
    let n = params.num_cells();
    let v = field.num_vertices();
    [v, 3 * v, 8 * n, 12 * n, n]
}

enum GroupSlice<'a> {
    Flat(&'a mut Vec<f64>),
    Vec3(&'a mut Vec<[f64; 3]>),
    Arr8(&'a mut Vec<[f64; 8]>),
    Arr12(&'a mut Vec<[f64; 12]>),
}

impl GroupSlice<'_> {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            GroupSlice::Flat(v) => v.to_vec(),
            GroupSlice::Vec3(v) => v.iter().flatten().copied().collect(),
            GroupSlice::Arr8(v) => v.iter().flatten().copied().collect(),
            GroupSlice::Arr12(v) => v.iter().flatten().copied().collect(),
        }
    }

    fn assign(&mut self, x: &[f64]) {
        match self {
            GroupSlice::Flat(v) => v.copy_from_slice(x),
            GroupSlice::Vec3(v) => v.iter_mut().zip(x.chunks_exact(3)).for_each(|(d, c)| d.copy_from_slice(c)),
            GroupSlice::Arr8(v) => v.iter_mut().zip(x.chunks_exact(8)).for_each(|(d, c)| d.copy_from_slice(c)),
            GroupSlice::Arr12(v) => v.iter_mut().zip(x.chunks_exact(12)).for_each(|(d, c)| d.copy_from_slice(c)),
        }
    }
}

/// Fresh state run to completion.
pub fn fit(cfg: &FitConfig, target: &TargetShape, tables: &DmcTables) -> Result<FitState> {
    let mut s = FitState::new(cfg)?;
    s.run(cfg, target, tables)?;
    Ok(s)
}
