//! Parameter groups and their binding onto a tape.

use serde::{Deserialize, Serialize};

use crate::tape::{Gradient, Tape, Var};

/// The five optimizable parameter groups, in registry order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Sdf,
    Deform,
    Alpha,
    Beta,
    Gamma,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Sdf, Group::Deform, Group::Alpha, Group::Beta, Group::Gamma];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Sdf => "sdf",
            Group::Deform => "deform_raw",
            Group::Alpha => "alpha_raw",
            Group::Beta => "beta_raw",
            Group::Gamma => "gamma_raw",
        }
    }
}

const UNBOUND: u32 = u32::MAX;

/// Lazily creates one leaf per parameter the first time a computation reads
/// it, so untouched parameters cost nothing and get an exact zero gradient.
///
/// Entries can also be pinned to a derived node (octree constrained values);
/// those are reported with zero gradient since they are not free.
#[derive(Clone, Debug)]
pub struct Binder {
    slots: [Vec<u32>; 5],
    derived: [Vec<bool>; 5],
}

impl Binder {
    pub fn new(sizes: [usize; 5]) -> Self {
        Self {
            slots: sizes.map(|n| vec![UNBOUND; n]),
            derived: sizes.map(|n| vec![false; n]),
        }
    }

    pub fn size(&self, g: Group) -> usize {
        self.slots[g.id()].len()
    }

    pub fn bind(&mut self, tape: &mut Tape, g: Group, index: usize, value: f64) -> Var {
        let slot = &mut self.slots[g.id()][index];
        if *slot == UNBOUND {
            let v = tape.leaf(value);
            *slot = v.index() as u32;
            v
        } else {
            var_from(*slot)
        }
    }

    pub fn get(&self, g: Group, index: usize) -> Option<Var> {
        let s = self.slots[g.id()][index];
        (s != UNBOUND).then(|| var_from(s))
    }

    /// Pins `index` to a derived node.
    pub fn pin(&mut self, g: Group, index: usize, v: Var) {
        self.slots[g.id()][index] = v.index() as u32;
        self.derived[g.id()][index] = true;
    }

    pub fn is_pinned(&self, g: Group, index: usize) -> bool {
        self.derived[g.id()][index]
    }

    /// Dense gradient of one group.
    pub fn gradient(&self, grad: &Gradient, g: Group) -> Vec<f64> {
        self.slots[g.id()]
            .iter()
            .zip(&self.derived[g.id()])
            .map(|(&s, &d)| if s == UNBOUND || d { 0.0 } else { grad.wrt(var_from(s)) })
            .collect()
    }

    pub fn gradients(&self, grad: &Gradient) -> GroupVecs {
        GroupVecs(Group::ALL.map(|g| self.gradient(grad, g)))
    }
}

fn var_from(s: u32) -> Var {
    crate::tape::var_from_index(s)
}

/// One dense vector per [`Group`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupVecs(pub [Vec<f64>; 5]);

impl GroupVecs {
    pub fn zeros_like(sizes: [usize; 5]) -> Self {
        Self(sizes.map(|n| vec![0.0; n]))
    }

    pub fn get(&self, g: Group) -> &[f64] {
        &self.0[g.id()]
    }

    pub fn get_mut(&mut self, g: Group) -> &mut Vec<f64> {
        &mut self.0[g.id()]
    }

    pub fn sizes(&self) -> [usize; 5] {
        [0, 1, 2, 3, 4].map(|i| self.0[i].len())
    }

    pub fn norm(&self, g: Group) -> f64 {
        self.get(g).iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}
