//! Scalar reverse-mode differentiation.
//!
//! Every recorded node stores its forward value and the local partial
//! derivatives with respect to its parents. [`Tape::backward`] sweeps the
//! record once in reverse order, so gradients are exact for the composite
//! map and bit-reproducible (the accumulation order is fixed by the record).
//!
//! Discrete choices (sign masks, table lookups, diagonal selection) are made
//! by the caller on forward values and never enter the tape.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[inline]
pub(crate) fn var_from_index(i: u32) -> Var {
    Var(i)
}

/// A point or vector whose coordinates live on a tape.
pub type Var3 = [Var; 3];

#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<f64>,
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints.get(v.index()).copied().unwrap_or(0.0)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(1024)
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let mut offsets = Vec::with_capacity(nodes + 1);
        offsets.push(0);
        Self {
            values: Vec::with_capacity(nodes),
            offsets,
            parents: Vec::with_capacity(nodes * 2),
            partials: Vec::with_capacity(nodes * 2),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of recorded parent links; together with [`Tape::len`] this
    /// fingerprints the structure of a recording.
    pub fn link_count(&self) -> usize {
        self.parents.len()
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn value3(&self, v: Var3) -> [f64; 3] {
        [self.value(v[0]), self.value(v[1]), self.value(v[2])]
    }

    /// Records a node with explicit local partials.
    #[inline]
    pub fn push(&mut self, value: f64, links: &[(Var, f64)]) -> Var {
        for &(p, d) in links {
            self.parents.push(p.0);
            self.partials.push(d);
        }
        self.push_finish(value)
    }

    #[inline]
    fn push_finish(&mut self, value: f64) -> Var {
        let id = self.values.len() as u32;
        self.values.push(value);
        self.offsets.push(self.parents.len() as u32);
        Var(id)
    }

    /// A leaf: a parameter or a constant. Gradients are reported for it but
    /// nothing propagates further.
    #[inline]
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(value, &[])
    }

    #[inline]
    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(value)
    }

    pub fn constant3(&mut self, p: [f64; 3]) -> Var3 {
        [self.constant(p[0]), self.constant(p[1]), self.constant(p[2])]
    }

    #[inline]
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, &[(a, 1.0), (b, 1.0)])
    }

    #[inline]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, &[(a, 1.0), (b, -1.0)])
    }

    #[inline]
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, &[(a, y), (b, x)])
    }

    #[inline]
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let q = x / y;
        self.push(q, &[(a, 1.0 / y), (b, -q / y)])
    }

    #[inline]
    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, &[(a, -1.0)])
    }

    #[inline]
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, &[(a, c)])
    }

    #[inline]
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, &[(a, 1.0)])
    }

    #[inline]
    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x * x, &[(a, 2.0 * x)])
    }

    /// Square root with a zero partial at the origin.
    #[inline]
    pub fn sqrt(&mut self, a: Var) -> Var {
        let r = self.value(a).max(0.0).sqrt();
        let d = if r > 0.0 { 0.5 / r } else { 0.0 };
        self.push(r, &[(a, d)])
    }

    #[inline]
    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(t, &[(a, 1.0 - t * t)])
    }

    #[inline]
    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(e, &[(a, e)])
    }

    #[inline]
    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.ln(), &[(a, 1.0 / x)])
    }

    #[inline]
    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.push(x.abs(), &[(a, d)])
    }

    /// `tanh(a) + 1`, the positive-weight activation.
    #[inline]
    pub fn tanh_plus_one(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(t + 1.0, &[(a, 1.0 - t * t)])
    }

    #[inline]
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.push(s, &[(a, s * (1.0 - s))])
    }

    /// Binary cross-entropy of a logit against a {0,1} target, written in the
    /// overflow-free form `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logit(&mut self, logit: Var, target: f64) -> Var {
        let x = self.value(logit);
        let v = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        let d = sigmoid(x) - target;
        self.push(v, &[(logit, d)])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut v = 0.0;
        for &x in xs {
            v += self.value(x);
            self.parents.push(x.0);
            self.partials.push(1.0);
        }
        self.push_finish(v)
    }

    /// Weighted sum with constant coefficients.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut v = 0.0;
        for &(x, c) in terms {
            v += self.value(x) * c;
        }
        self.push(v, terms)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        if xs.is_empty() {
            return self.constant(0.0);
        }
        let c = 1.0 / xs.len() as f64;
        let mut v = 0.0;
        for &x in xs {
            v += self.value(x);
            self.parents.push(x.0);
            self.partials.push(c);
        }
        self.push_finish(v * c)
    }

    // -- 3-vectors ----------------------------------------------------------

    pub fn add3(&mut self, a: Var3, b: Var3) -> Var3 {
        [self.add(a[0], b[0]), self.add(a[1], b[1]), self.add(a[2], b[2])]
    }

    pub fn sub3(&mut self, a: Var3, b: Var3) -> Var3 {
        [self.sub(a[0], b[0]), self.sub(a[1], b[1]), self.sub(a[2], b[2])]
    }

    pub fn scale3(&mut self, a: Var3, c: f64) -> Var3 {
        [self.scale(a[0], c), self.scale(a[1], c), self.scale(a[2], c)]
    }

    /// Scalar variable times vector.
    pub fn mul3(&mut self, s: Var, a: Var3) -> Var3 {
        [self.mul(s, a[0]), self.mul(s, a[1]), self.mul(s, a[2])]
    }

    pub fn div3(&mut self, a: Var3, s: Var) -> Var3 {
        [self.div(a[0], s), self.div(a[1], s), self.div(a[2], s)]
    }

    pub fn dot3(&mut self, a: Var3, b: Var3) -> Var {
        let (x, y) = (self.value3(a), self.value3(b));
        let v = x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
        self.push(
            v,
            &[
                (a[0], y[0]),
                (a[1], y[1]),
                (a[2], y[2]),
                (b[0], x[0]),
                (b[1], x[1]),
                (b[2], x[2]),
            ],
        )
    }

    pub fn norm_sq3(&mut self, a: Var3) -> Var {
        let x = self.value3(a);
        let v = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
        self.push(v, &[(a[0], 2.0 * x[0]), (a[1], 2.0 * x[1]), (a[2], 2.0 * x[2])])
    }

    /// Euclidean norm; zero partials at the origin.
    pub fn norm3(&mut self, a: Var3) -> Var {
        let x = self.value3(a);
        let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        if n > 0.0 {
            self.push(n, &[(a[0], x[0] / n), (a[1], x[1] / n), (a[2], x[2] / n)])
        } else {
            self.push(0.0, &[(a[0], 0.0), (a[1], 0.0), (a[2], 0.0)])
        }
    }

    pub fn dist3(&mut self, a: Var3, b: Var3) -> Var {
        let d = self.sub3(a, b);
        self.norm3(d)
    }

    pub fn cross3(&mut self, a: Var3, b: Var3) -> Var3 {
        let (x, y) = (self.value3(a), self.value3(b));
        let c0 = self.push(
            x[1] * y[2] - x[2] * y[1],
            &[(a[1], y[2]), (b[2], x[1]), (a[2], -y[1]), (b[1], -x[2])],
        );
        let c1 = self.push(
            x[2] * y[0] - x[0] * y[2],
            &[(a[2], y[0]), (b[0], x[2]), (a[0], -y[2]), (b[2], -x[0])],
        );
        let c2 = self.push(
            x[0] * y[1] - x[1] * y[0],
            &[(a[0], y[1]), (b[1], x[0]), (a[1], -y[0]), (b[0], -x[1])],
        );
        [c0, c1, c2]
    }

    /// Componentwise weighted sum of points with constant weights.
    pub fn lincomb3(&mut self, terms: &[(Var3, f64)]) -> Var3 {
        let mut out = [Var(0); 3];
        let mut buf: Vec<(Var, f64)> = Vec::with_capacity(terms.len());
        for (k, o) in out.iter_mut().enumerate() {
            buf.clear();
            buf.extend(terms.iter().map(|&(p, c)| (p[k], c)));
            *o = self.lincomb(&buf);
        }
        out
    }

    /// Reverse sweep from `output`. Refuses when any forward value recorded up
    /// to `output` is not finite.
    pub fn backward(&self, output: Var) -> Result<Gradient> {
        let n = output.index() + 1;
        if let Some(bad) = self.values[..n].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "forward value of node {bad} is {}",
                self.values[bad]
            )));
        }
        let mut adj = vec![0.0f64; n];
        adj[n - 1] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
            for k in s..e {
                adj[self.parents[k] as usize] += self.partials[k] * a;
            }
        }
        Ok(Gradient { adjoints: adj })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn elementary_partials_match_differences() {
        type Op = fn(&mut Tape, Var) -> Var;
        let cases: Vec<(Op, fn(f64) -> f64)> = vec![
            (|t, a| t.tanh(a), |x| x.tanh()),
            (|t, a| t.sigmoid(a), sigmoid),
            (|t, a| t.sqrt(a), |x| x.sqrt()),
            (|t, a| t.exp(a), |x| x.exp()),
            (|t, a| t.ln(a), |x| x.ln()),
            (|t, a| t.square(a), |x| x * x),
            (|t, a| t.bce_with_logit(a, 1.0), |x| -sigmoid(x).ln()),
            (|t, a| t.bce_with_logit(a, 0.0), |x| -(1.0 - sigmoid(x)).ln()),
        ];
        for (op, f) in cases {
            for &x in &[0.3, 1.7, 2.5] {
                let mut t = Tape::new();
                let a = t.leaf(x);
                let y = op(&mut t, a);
                assert!((t.value(y) - f(x)).abs() < 1e-12);
                let g = t.backward(y).unwrap();
                assert!((g.wrt(a) - fd(f, x)).abs() < 1e-6, "x={x}");
            }
        }
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(3.0);
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z).unwrap();
        assert_eq!(g.wrt(x), 7.0);
    }

    #[test]
    fn vector_helpers() {
        let mut t = Tape::new();
        let a = [t.leaf(1.0), t.leaf(2.0), t.leaf(2.0)];
        let n = t.norm3(a);
        assert_eq!(t.value(n), 3.0);
        let g = t.backward(n).unwrap();
        assert!((g.wrt(a[1]) - 2.0 / 3.0).abs() < 1e-15);
        let b = t.constant3([0.0, 0.0, 1.0]);
        let c = t.cross3(a, b);
        assert_eq!(t.value3(c), [2.0, -1.0, 0.0]);
    }

    #[test]
    fn refuses_non_finite_forward() {
        let mut t = Tape::new();
        let x = t.leaf(0.0);
        let y = t.ln(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut t = Tape::new();
        let xs: Vec<Var> = (0..50).map(|i| t.leaf(0.1 * i as f64)).collect();
        let sq: Vec<Var> = xs.iter().map(|&x| t.tanh(x)).collect();
        let s = t.sum(&sq);
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        for &x in &xs {
            assert_eq!(g1.wrt(x).to_bits(), g2.wrt(x).to_bits());
        }
    }
}
