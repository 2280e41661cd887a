//! Bounded dual simplex over a dense tableau, restartable from a stored basis.
//!
//! Used by branch-and-bound: a child node differs from its parent by one
//! tightened bound, so the parent's optimal basis stays dual feasible and a
//! handful of dual pivots restore primal feasibility.

use super::model::{MilpModel, Relation};

const PRIMAL_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const RATIO_TIE: f64 = 1e-12;
const NONE: usize = usize::MAX;

/// Basic columns by row plus, for every column, whether it rests at its
/// upper bound when nonbasic.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Basis {
    basic: Vec<usize>,
    at_upper: Vec<bool>,
}

/// Full copy of the tableau state.
#[derive(Debug, Clone, Default)]
pub(crate) struct Snapshot {
    rows: Vec<f64>,
    reduced: Vec<f64>,
    lo: Vec<f64>,
    up: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    basic_row: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DualStatus {
    Optimal,
    Infeasible,
    /// The objective reached the cutoff before primal feasibility.
    Cutoff,
}

pub(crate) struct DualLp {
    m: usize,
    n: usize,
    nc: usize,
    /// Row width: `nc` columns plus the right-hand side.
    w: usize,
    original: Vec<f64>,
    cost: Vec<f64>,
    constant: f64,
    rows: Vec<f64>,
    reduced: Vec<f64>,
    lo: Vec<f64>,
    up: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    basic_row: Vec<usize>,
    pub iterations: u64,
}

impl DualLp {
    /// `None` when the slack basis is not dual feasible, i.e. some column
    /// with negative cost has no finite upper bound, or a lower bound is
    /// infinite.
    pub(crate) fn new(model: &MilpModel) -> Option<DualLp> {
        let n = model.num_vars();
        let m = model.constraints().len();
        let nc = n + m;
        let w = nc + 1;
        for (v, &c) in model.variables().iter().zip(model.objective()) {
            if !v.lower.is_finite() || (c < 0.0 && !v.upper.is_finite()) {
                return None;
            }
        }
        let mut original = vec![0.0; m * w];
        let mut lo = vec![0.0; nc];
        let mut up = vec![0.0; nc];
        for (i, c) in model.constraints().iter().enumerate() {
            let row = &mut original[i * w..(i + 1) * w];
            for &(j, a) in &c.terms {
                row[j] += a;
            }
            row[n + i] = 1.0;
            row[nc] = c.rhs;
            let (l, u) = match c.relation {
                Relation::Le => (0.0, f64::INFINITY),
                Relation::Ge => (f64::NEG_INFINITY, 0.0),
                Relation::Eq => (0.0, 0.0),
            };
            lo[n + i] = l;
            up[n + i] = u;
        }
        let mut cost = vec![0.0; nc];
        cost[..n].copy_from_slice(model.objective());
        Some(DualLp {
            m,
            n,
            nc,
            w,
            rows: original.clone(),
            original,
            reduced: cost.clone(),
            cost,
            constant: model.objective_constant,
            lo,
            up,
            x: vec![0.0; nc],
            basis: (n..nc).collect(),
            basic_row: (0..nc).map(|j| if j >= n { j - n } else { NONE }).collect(),
            iterations: 0,
        })
    }

    pub(crate) fn objective(&self) -> f64 {
        self.constant + self.cost[..self.n].iter().zip(&self.x).map(|(c, x)| c * x).sum::<f64>()
    }

    pub(crate) fn values(&self) -> &[f64] {
        &self.x[..self.n]
    }

    /// Nonbasic structural columns with their reduced cost and whether they
    /// rest at the upper bound.
    pub(crate) fn nonbasic_structurals(&self) -> impl Iterator<Item = (usize, f64, bool)> + '_ {
        (0..self.n)
            .filter(|&j| self.basic_row[j] == NONE && self.lo[j] < self.up[j])
            .map(|j| (j, self.reduced[j], self.x[j] == self.up[j]))
    }

    /// Bytes held by one snapshot.
    pub(crate) fn snapshot_size(&self) -> usize {
        8 * (self.rows.len() + 5 * self.nc + self.m)
    }

    /// Copies the tableau into `into`, reusing its buffers.
    pub(crate) fn save(&self, into: &mut Snapshot) {
        fn copy<T: Copy>(dst: &mut Vec<T>, src: &[T]) {
            dst.clear();
            dst.extend_from_slice(src);
        }
        copy(&mut into.rows, &self.rows);
        copy(&mut into.reduced, &self.reduced);
        copy(&mut into.lo, &self.lo);
        copy(&mut into.up, &self.up);
        copy(&mut into.x, &self.x);
        copy(&mut into.basis, &self.basis);
        copy(&mut into.basic_row, &self.basic_row);
    }

    pub(crate) fn restore(&mut self, from: &Snapshot) {
        self.rows.copy_from_slice(&from.rows);
        self.reduced.copy_from_slice(&from.reduced);
        self.lo.copy_from_slice(&from.lo);
        self.up.copy_from_slice(&from.up);
        self.x.copy_from_slice(&from.x);
        self.basis.copy_from_slice(&from.basis);
        self.basic_row.copy_from_slice(&from.basic_row);
    }

    pub(crate) fn basis(&self) -> Basis {
        Basis {
            basic: self.basis.clone(),
            at_upper: (0..self.nc)
                .map(|j| self.basic_row[j] == NONE && self.lo[j] < self.up[j] && self.x[j] == self.up[j])
                .collect(),
        }
    }

    /// Loads structural bounds and the given basis (or the slack basis),
    /// recomputing the tableau from the original rows. Returns false if the
    /// basis is singular or not dual feasible, in which case the caller
    /// should fall back to the slack basis.
    pub(crate) fn load(&mut self, lower: &[f64], upper: &[f64], basis: Option<&Basis>) -> bool {
        self.lo[..self.n].copy_from_slice(lower);
        self.up[..self.n].copy_from_slice(upper);
        self.rows.copy_from_slice(&self.original);
        self.basis = (self.n..self.nc).collect();
        self.basic_row.fill(NONE);
        let mut at_upper = None;
        if let Some(b) = basis {
            if !self.factor(&b.basic) {
                return false;
            }
            at_upper = Some(&b.at_upper);
        }
        for (r, &b) in self.basis.iter().enumerate() {
            self.basic_row[b] = r;
        }
        self.price();
        for j in 0..self.nc {
            if self.basic_row[j] != NONE {
                continue;
            }
            let d = self.reduced[j];
            let upper_ok = self.up[j].is_finite();
            let lower_ok = self.lo[j].is_finite();
            let v = if self.lo[j] == self.up[j] {
                self.lo[j]
            } else if d > DUAL_TOL {
                if !lower_ok {
                    return false;
                }
                self.lo[j]
            } else if d < -DUAL_TOL {
                if !upper_ok {
                    return false;
                }
                self.up[j]
            } else if (at_upper.is_some_and(|a| a[j]) && upper_ok) || !lower_ok {
                self.up[j]
            } else {
                self.lo[j]
            };
            if !v.is_finite() {
                return false;
            }
            self.x[j] = v;
        }
        for r in 0..self.m {
            let row = &self.rows[r * self.w..(r + 1) * self.w];
            let mut v = row[self.nc];
            for j in 0..self.nc {
                if self.basic_row[j] == NONE && row[j] != 0.0 {
                    v -= row[j] * self.x[j];
                }
            }
            self.x[self.basis[r]] = v;
        }
        true
    }

    /// Gauss-Jordan with partial pivoting onto `basic`.
    fn factor(&mut self, basic: &[usize]) -> bool {
        if basic.len() != self.m {
            return false;
        }
        let mut assigned = vec![false; self.m];
        let mut order = vec![NONE; self.m];
        for &col in basic {
            let mut best = NONE;
            let mut best_abs = PIVOT_TOL;
            for r in 0..self.m {
                let a = self.rows[r * self.w + col].abs();
                if !assigned[r] && a > best_abs {
                    best = r;
                    best_abs = a;
                }
            }
            if best == NONE {
                return false;
            }
            assigned[best] = true;
            order[best] = col;
            self.eliminate(best, col);
        }
        self.basis = order;
        true
    }

    fn eliminate(&mut self, r: usize, j: usize) {
        let w = self.w;
        let p = self.rows[r * w + j];
        {
            let row = &mut self.rows[r * w..(r + 1) * w];
            row.iter_mut().for_each(|v| *v /= p);
            row[j] = 1.0;
        }
        let (before, rest) = self.rows.split_at_mut(r * w);
        let (pivot_row, after) = rest.split_at_mut(w);
        for row in before.chunks_exact_mut(w).chain(after.chunks_exact_mut(w)) {
            let f = row[j];
            if f != 0.0 {
                for (v, &pr) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= f * pr;
                }
                row[j] = 0.0;
            }
        }
    }

    fn price(&mut self) {
        self.reduced.copy_from_slice(&self.cost);
        for i in 0..self.m {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.rows[i * self.w..i * self.w + self.nc];
                for (d, &a) in self.reduced.iter_mut().zip(row) {
                    *d -= cb * a;
                }
            }
        }
    }

    /// Tightens the bounds of structural column `j`, keeping the tableau
    /// dual feasible.
    pub(crate) fn set_bounds(&mut self, j: usize, lower: f64, upper: f64) {
        self.lo[j] = lower;
        self.up[j] = upper;
        if self.basic_row[j] != NONE {
            return;
        }
        let old = self.x[j];
        let d = self.reduced[j];
        let v = if lower == upper || d > DUAL_TOL || !upper.is_finite() {
            lower
        } else if d < -DUAL_TOL {
            upper
        } else {
            old.clamp(lower, upper)
        };
        let delta = v - old;
        if delta != 0.0 {
            for i in 0..self.m {
                let a = self.rows[i * self.w + j];
                if a != 0.0 {
                    self.x[self.basis[i]] -= a * delta;
                }
            }
            self.x[j] = v;
        }
    }

    fn violation(&self, b: usize) -> f64 {
        let x = self.x[b];
        let lo = self.lo[b];
        let up = self.up[b];
        if x < lo - PRIMAL_TOL * (1.0 + lo.abs()) {
            lo - x
        } else if x > up + PRIMAL_TOL * (1.0 + up.abs()) {
            x - up
        } else {
            0.0
        }
    }

    /// Runs dual simplex pivots until primal feasibility, infeasibility, or
    /// an objective of at least `cutoff`. Leaving rows follow the largest
    /// violation; after a long run without progress the smallest-index rule
    /// takes over so degenerate cycles cannot persist.
    pub(crate) fn solve(&mut self, cutoff: f64) -> DualStatus {
        let bland_after = 20 * (self.m + self.n) as u64 + 100;
        let mut local = 0u64;
        loop {
            if self.objective() >= cutoff {
                return DualStatus::Cutoff;
            }
            let bland = local > bland_after;
            let mut leave = NONE;
            let mut worst = 0.0;
            for r in 0..self.m {
                let v = self.violation(self.basis[r]);
                if v <= 0.0 {
                    continue;
                }
                let better = if bland {
                    leave == NONE || self.basis[r] < self.basis[leave]
                } else {
                    v > worst
                };
                if better {
                    leave = r;
                    worst = v;
                }
            }
            if leave == NONE {
                return DualStatus::Optimal;
            }
            let r = leave;
            let b = self.basis[r];
            let below = self.x[b] < self.lo[b];
            let s = if below { 1.0 } else { -1.0 };
            let row = &self.rows[r * self.w..r * self.w + self.nc];
            let mut enter = NONE;
            let mut best = f64::INFINITY;
            for (j, &alpha) in row.iter().enumerate() {
                if self.basic_row[j] != NONE || self.lo[j] >= self.up[j] || alpha.abs() <= PIVOT_TOL {
                    continue;
                }
                // Moving x_j by dx changes x_b by -alpha * dx.
                let can_raise = self.x[j] < self.up[j] && -alpha * s > 0.0;
                let can_lower = self.x[j] > self.lo[j] && alpha * s > 0.0;
                if !can_raise && !can_lower {
                    continue;
                }
                let ratio = self.reduced[j].abs() / alpha.abs();
                if ratio < best - RATIO_TIE {
                    best = ratio;
                    enter = j;
                }
            }
            if enter == NONE {
                return DualStatus::Infeasible;
            }
            let j = enter;
            let alpha = self.rows[r * self.w + j];
            let target = if below { self.lo[b] } else { self.up[b] };
            let t = (self.x[b] - target) / alpha;
            for i in 0..self.m {
                let a = self.rows[i * self.w + j];
                if a != 0.0 {
                    self.x[self.basis[i]] -= a * t;
                }
            }
            self.x[j] += t;
            self.x[b] = target;
            self.pivot(r, j);
            self.iterations += 1;
            local += 1;
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        self.eliminate(r, j);
        let f = self.reduced[j];
        if f != 0.0 {
            let pivot_row = &self.rows[r * self.w..r * self.w + self.nc];
            for (d, &pr) in self.reduced.iter_mut().zip(pivot_row) {
                *d -= f * pr;
            }
            self.reduced[j] = 0.0;
        }
        let old = self.basis[r];
        self.basic_row[old] = NONE;
        self.basic_row[j] = r;
        self.basis[r] = j;
    }
}
