//! Dense bounded-variable primal simplex.
//!
//! Two phases over a full tableau. Nonbasic columns rest at one of their
//! bounds; entering and leaving choices follow Bland's smallest-index rule,
//! which rules out cycling on degenerate vertices.

use serde::{Deserialize, Serialize};

use super::model::{MilpModel, Relation, VarKind};
use super::MilpError;

pub const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const PHASE1_TOL: f64 = 1e-7;
const RATIO_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    /// Phase one stopped with a positive sum of infeasibilities.
    Infeasible {
        phase1_objective: f64,
    },
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub objective: f64,
    pub values: Vec<f64>,
    pub iterations: u64,
}

/// Solves the linear relaxation of `model`. With `relax == false` the model
/// must not declare binary variables.
pub fn solve_lp(model: &MilpModel, relax: bool) -> Result<LpSolution, MilpError> {
    model.validate()?;
    if !relax && model.variables().iter().any(|v| v.kind == VarKind::Binary) {
        return Err(MilpError::NotAnLp);
    }
    let lower: Vec<f64> = model.variables().iter().map(|v| v.lower).collect();
    let upper: Vec<f64> = model.variables().iter().map(|v| v.upper).collect();
    let sol = solve_with_bounds(model, &lower, &upper)?;
    if sol.status == LpStatus::Unbounded {
        return Err(MilpError::Unbounded);
    }
    Ok(sol)
}

/// LP over the model's rows with column bounds overridden by `lower`/`upper`.
pub(crate) fn solve_with_bounds(model: &MilpModel, lower: &[f64], upper: &[f64]) -> Result<LpSolution, MilpError> {
    let n = model.num_vars();
    if let Some(v) = (0..n).find(|&j| lower[j] == f64::NEG_INFINITY) {
        return Err(MilpError::FreeVariable(model.variables()[v].name.clone()));
    }
    if (0..n).any(|j| lower[j] > upper[j]) {
        return Ok(LpSolution {
            status: LpStatus::Infeasible {
                phase1_objective: f64::INFINITY,
            },
            objective: f64::INFINITY,
            values: Vec::new(),
            iterations: 0,
        });
    }
    let mut tab = Tableau::new(model, lower, upper);
    let art_cost: Vec<f64> = (0..tab.ncols)
        .map(|j| if j >= tab.art_start { 1.0 } else { 0.0 })
        .collect();
    if tab.has_artificials() {
        tab.optimize(&art_cost);
        let infeasibility: f64 = tab
            .basis
            .iter()
            .filter(|&&b| b >= tab.art_start)
            .map(|&b| tab.x[b])
            .sum();
        if infeasibility > PHASE1_TOL {
            return Ok(LpSolution {
                status: LpStatus::Infeasible {
                    phase1_objective: infeasibility,
                },
                objective: f64::INFINITY,
                values: Vec::new(),
                iterations: tab.iterations,
            });
        }
        tab.retire_artificials();
    }
    let mut cost = vec![0.0; tab.ncols];
    cost[..n].copy_from_slice(model.objective());
    let bounded = tab.optimize(&cost);
    let values = tab.x[..n].to_vec();
    if !bounded {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            objective: f64::NEG_INFINITY,
            values,
            iterations: tab.iterations,
        });
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective: model.objective_value(&values),
        values,
        iterations: tab.iterations,
    })
}

struct Tableau {
    m: usize,
    ncols: usize,
    art_start: usize,
    /// Row-major `m x ncols`, always in the current basis' canonical form.
    rows: Vec<f64>,
    reduced: Vec<f64>,
    lo: Vec<f64>,
    up: Vec<f64>,
    /// Current value of every column.
    x: Vec<f64>,
    basis: Vec<usize>,
    basic_row: Vec<Option<usize>>,
    iterations: u64,
}

impl Tableau {
    /// Columns: structural, one slack per row, one artificial per row.
    fn new(model: &MilpModel, lower: &[f64], upper: &[f64]) -> Tableau {
        let n = model.num_vars();
        let m = model.constraints().len();
        let art_start = n + m;
        let ncols = n + 2 * m;
        let mut lo = vec![0.0; ncols];
        let mut up = vec![0.0; ncols];
        lo[..n].copy_from_slice(lower);
        up[..n].copy_from_slice(upper);

        let mut x = vec![0.0; ncols];
        x[..n].copy_from_slice(lower);

        let mut rows = vec![0.0; m * ncols];
        let mut basis = Vec::with_capacity(m);
        for (i, c) in model.constraints().iter().enumerate() {
            let row = &mut rows[i * ncols..(i + 1) * ncols];
            for &(j, a) in &c.terms {
                row[j] += a;
            }
            let slack = n + i;
            row[slack] = 1.0;
            let (s_lo, s_up) = match c.relation {
                Relation::Le => (0.0, f64::INFINITY),
                Relation::Ge => (f64::NEG_INFINITY, 0.0),
                Relation::Eq => (0.0, 0.0),
            };
            lo[slack] = s_lo;
            up[slack] = s_up;
            let residual = c.rhs - c.activity(&x[..n]);
            let art = art_start + i;
            if residual >= s_lo && residual <= s_up {
                x[slack] = residual;
                basis.push(slack);
            } else {
                x[slack] = 0.0;
                let sign = if residual >= 0.0 { 1.0 } else { -1.0 };
                row[art] = sign;
                if sign < 0.0 {
                    row.iter_mut().for_each(|v| *v = -*v);
                }
                up[art] = f64::INFINITY;
                x[art] = residual.abs();
                basis.push(art);
            }
        }
        let mut basic_row = vec![None; ncols];
        for (i, &b) in basis.iter().enumerate() {
            basic_row[b] = Some(i);
        }
        Tableau {
            m,
            ncols,
            art_start,
            rows,
            reduced: vec![0.0; ncols],
            lo,
            up,
            x,
            basis,
            basic_row,
            iterations: 0,
        }
    }

    fn has_artificials(&self) -> bool {
        self.basis.iter().any(|&b| b >= self.art_start)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.rows[i * self.ncols + j]
    }

    fn price(&mut self, cost: &[f64]) {
        self.reduced.copy_from_slice(cost);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.rows[i * self.ncols..(i + 1) * self.ncols];
                for (d, &a) in self.reduced.iter_mut().zip(row) {
                    *d -= cb * a;
                }
            }
        }
    }

    /// Bland entering choice: lowest-index improving nonbasic column.
    fn entering(&self) -> Option<(usize, f64)> {
        (0..self.ncols).find_map(|j| {
            if self.basic_row[j].is_some() || self.up[j] <= self.lo[j] {
                return None;
            }
            let d = self.reduced[j];
            if d < -COST_TOL && self.x[j] < self.up[j] {
                Some((j, 1.0))
            } else if d > COST_TOL && self.x[j] > self.lo[j] {
                Some((j, -1.0))
            } else {
                None
            }
        })
    }

    /// Returns false when the objective is unbounded below.
    fn optimize(&mut self, cost: &[f64]) -> bool {
        self.price(cost);
        while let Some((j, dir)) = self.entering() {
            self.iterations += 1;
            let flip = self.up[j] - self.lo[j];
            let mut step = f64::INFINITY;
            let mut leave: Option<usize> = None;
            for i in 0..self.m {
                let g = dir * self.at(i, j);
                let b = self.basis[i];
                let ratio = if g > PIVOT_TOL && self.lo[b].is_finite() {
                    ((self.x[b] - self.lo[b]) / g).max(0.0)
                } else if g < -PIVOT_TOL && self.up[b].is_finite() {
                    ((self.up[b] - self.x[b]) / -g).max(0.0)
                } else {
                    continue;
                };
                let better = match leave {
                    None => true,
                    Some(r) => ratio < step - RATIO_TIE || (ratio <= step + RATIO_TIE && b < self.basis[r]),
                };
                if better {
                    step = ratio;
                    leave = Some(i);
                }
            }
            if flip <= step {
                if !flip.is_finite() {
                    return false;
                }
                self.shift(j, dir * flip);
                self.x[j] = if dir > 0.0 { self.up[j] } else { self.lo[j] };
                continue;
            }
            let Some(r) = leave else {
                return false;
            };
            let b = self.basis[r];
            let hits_lower = dir * self.at(r, j) > 0.0;
            self.shift(j, dir * step);
            self.x[j] += dir * step;
            self.x[b] = if hits_lower { self.lo[b] } else { self.up[b] };
            self.pivot(r, j);
        }
        true
    }

    /// Moves basic columns for a change `delta` of nonbasic column `j`.
    fn shift(&mut self, j: usize, delta: f64) {
        if delta == 0.0 {
            return;
        }
        for i in 0..self.m {
            let a = self.at(i, j);
            if a != 0.0 {
                let b = self.basis[i];
                let v = self.x[b] - delta * a;
                self.x[b] = v.clamp(self.lo[b], self.up[b]);
            }
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let nc = self.ncols;
        let p = self.rows[r * nc + j];
        {
            let row = &mut self.rows[r * nc..(r + 1) * nc];
            row.iter_mut().for_each(|v| *v /= p);
            row[j] = 1.0;
        }
        let (before, rest) = self.rows.split_at_mut(r * nc);
        let (pivot_row, after) = rest.split_at_mut(nc);
        for row in before.chunks_exact_mut(nc).chain(after.chunks_exact_mut(nc)) {
            let f = row[j];
            if f != 0.0 {
                for (v, &pr) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= f * pr;
                }
                row[j] = 0.0;
            }
        }
        let f = self.reduced[j];
        if f != 0.0 {
            for (d, &pr) in self.reduced.iter_mut().zip(pivot_row.iter()) {
                *d -= f * pr;
            }
            self.reduced[j] = 0.0;
        }
        let old = self.basis[r];
        self.basic_row[old] = None;
        self.basic_row[j] = Some(r);
        self.basis[r] = j;
    }

    /// After a successful phase one: pivot zero-valued artificials out where
    /// possible and fix every artificial at zero.
    fn retire_artificials(&mut self) {
        for r in 0..self.m {
            if self.basis[r] < self.art_start {
                continue;
            }
            let candidate = (0..self.art_start)
                .filter(|&j| self.basic_row[j].is_none())
                .max_by(|&a, &b| self.at(r, a).abs().total_cmp(&self.at(r, b).abs()));
            if let Some(j) = candidate {
                if self.at(r, j).abs() > 1e-7 {
                    let art = self.basis[r];
                    self.pivot(r, j);
                    self.x[art] = 0.0;
                }
            }
        }
        for j in self.art_start..self.ncols {
            self.lo[j] = 0.0;
            self.up[j] = 0.0;
            if self.basic_row[j].is_none() {
                self.x[j] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn textbook_maximisation() {
        // max 3x + 5y  s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  ->  36 at (2, 6)
        let mut m = MilpModel::new("wyndor");
        let x = m.add_continuous("x", 0.0, f64::INFINITY, -3.0).unwrap();
        let y = m.add_continuous("y", 0.0, f64::INFINITY, -5.0).unwrap();
        m.add_constraint("c1", vec![(x, 1.0)], Relation::Le, 4.0).unwrap();
        m.add_constraint("c2", vec![(y, 2.0)], Relation::Le, 12.0).unwrap();
        m.add_constraint("c3", vec![(x, 3.0), (y, 2.0)], Relation::Le, 18.0)
            .unwrap();
        let s = solve_lp(&m, false).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(close(s.objective, -36.0));
        assert!(close(s.values[0], 2.0) && close(s.values[1], 6.0));
    }

    #[test]
    fn equality_and_ge_rows_need_phase_one() {
        // min x + 2y  s.t. x + y = 3, x - y >= -1, x <= 1.5
        let mut m = MilpModel::new("p1");
        let x = m.add_continuous("x", 0.0, 1.5, 1.0).unwrap();
        let y = m.add_continuous("y", 0.0, f64::INFINITY, 2.0).unwrap();
        m.add_constraint("sum", vec![(x, 1.0), (y, 1.0)], Relation::Eq, 3.0)
            .unwrap();
        m.add_constraint("diff", vec![(x, 1.0), (y, -1.0)], Relation::Ge, -1.0)
            .unwrap();
        let s = solve_lp(&m, false).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(close(s.values[0], 1.5) && close(s.values[1], 1.5));
        assert!(close(s.objective, 4.5));
    }

    #[test]
    fn detects_infeasibility() {
        let mut m = MilpModel::new("inf");
        let x = m.add_continuous("x", 0.0, 1.0, 1.0).unwrap();
        m.add_constraint("c", vec![(x, 1.0)], Relation::Ge, 2.0).unwrap();
        let s = solve_lp(&m, false).unwrap();
        match s.status {
            LpStatus::Infeasible { phase1_objective } => assert!(close(phase1_objective, 1.0)),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn detects_unboundedness() {
        let mut m = MilpModel::new("unb");
        let x = m.add_continuous("x", 0.0, f64::INFINITY, -1.0).unwrap();
        m.add_constraint("c", vec![(x, 1.0)], Relation::Ge, 0.0).unwrap();
        assert_eq!(solve_lp(&m, false), Err(MilpError::Unbounded));
    }

    #[test]
    fn relax_flag_guards_binaries() {
        let mut m = MilpModel::new("b");
        m.add_binary("z", 1.0).unwrap();
        assert_eq!(solve_lp(&m, false), Err(MilpError::NotAnLp));
        let s = solve_lp(&m, true).unwrap();
        assert!(close(s.objective, 0.0));
    }

    #[test]
    fn degenerate_problem_terminates() {
        // Classic Beale cycling example (minimisation form).
        let mut m = MilpModel::new("beale");
        let x4 = m.add_continuous("x4", 0.0, f64::INFINITY, -0.75).unwrap();
        let x5 = m.add_continuous("x5", 0.0, f64::INFINITY, 150.0).unwrap();
        let x6 = m.add_continuous("x6", 0.0, f64::INFINITY, -0.02).unwrap();
        let x7 = m.add_continuous("x7", 0.0, f64::INFINITY, 6.0).unwrap();
        m.add_constraint(
            "r1",
            vec![(x4, 0.25), (x5, -60.0), (x6, -0.04), (x7, 9.0)],
            Relation::Le,
            0.0,
        )
        .unwrap();
        m.add_constraint(
            "r2",
            vec![(x4, 0.5), (x5, -90.0), (x6, -0.02), (x7, 3.0)],
            Relation::Le,
            0.0,
        )
        .unwrap();
        m.add_constraint("r3", vec![(x6, 1.0)], Relation::Le, 1.0).unwrap();
        let s = solve_lp(&m, false).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(close(s.objective, -0.05), "{}", s.objective);
    }
}
