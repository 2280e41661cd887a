//! Activity-based bound propagation for binaries.
//!
//! For a row `sum a_j x_j <= b`, the smallest attainable activity under the
//! current bounds rules out every binary whose move off its bound would push
//! the activity past `b`. Fixings are chased through the rows they touch
//! until nothing changes.

use super::model::{MilpModel, Relation, VarKind};

const PROP_TOL: f64 = 1e-9;

pub(crate) struct Propagator {
    rows: Vec<(Vec<(usize, f64)>, Relation, f64)>,
    col_rows: Vec<Vec<usize>>,
    is_binary: Vec<bool>,
}

pub(crate) enum Propagation {
    Fixed(Vec<(usize, bool)>),
    Infeasible,
}

impl Propagator {
    pub(crate) fn new(model: &MilpModel) -> Propagator {
        let n = model.num_vars();
        let mut col_rows = vec![Vec::new(); n];
        let rows: Vec<_> = model
            .constraints()
            .iter()
            .map(|c| (c.terms.clone(), c.relation, c.rhs))
            .collect();
        for (i, (terms, _, _)) in rows.iter().enumerate() {
            for &(j, a) in terms {
                if a != 0.0 {
                    col_rows[j].push(i);
                }
            }
        }
        let is_binary = model.variables().iter().map(|v| v.kind == VarKind::Binary).collect();
        Propagator {
            rows,
            col_rows,
            is_binary,
        }
    }

    /// Tightens binaries in `lower`/`upper` to a fixpoint over every row.
    pub(crate) fn run(&self, lower: &mut [f64], upper: &mut [f64]) -> Propagation {
        let mut queued = vec![true; self.rows.len()];
        let mut queue: Vec<usize> = (0..self.rows.len()).rev().collect();
        let mut fixed = Vec::new();
        while let Some(i) = queue.pop() {
            queued[i] = false;
            let (terms, rel, rhs) = &self.rows[i];
            let tol = PROP_TOL * (1.0 + rhs.abs());
            let (mut min_act, mut max_act) = (0.0, 0.0);
            let (mut min_inf, mut max_inf) = (0usize, 0usize);
            for &(j, a) in terms {
                let (lo, up) = if a >= 0.0 {
                    (lower[j], upper[j])
                } else {
                    (upper[j], lower[j])
                };
                if lo.is_finite() {
                    min_act += a * lo;
                } else {
                    min_inf += 1;
                }
                if up.is_finite() {
                    max_act += a * up;
                } else {
                    max_inf += 1;
                }
            }
            let check_le = matches!(rel, Relation::Le | Relation::Eq);
            let check_ge = matches!(rel, Relation::Ge | Relation::Eq);
            if (check_le && min_inf == 0 && min_act > rhs + tol) || (check_ge && max_inf == 0 && max_act < rhs - tol) {
                return Propagation::Infeasible;
            }
            for &(j, a) in terms {
                if !self.is_binary[j] || lower[j] == upper[j] || a == 0.0 {
                    continue;
                }
                // Range of `a * x_j` is |a| wide; leaving its best end costs |a|.
                let span = a.abs();
                let mut fix: Option<bool> = None;
                if check_le && min_inf == 0 && min_act + span > rhs + tol {
                    fix = Some(a < 0.0);
                }
                if check_ge && max_inf == 0 && max_act - span < rhs - tol {
                    let want = a > 0.0;
                    if fix.is_some_and(|f| f != want) {
                        return Propagation::Infeasible;
                    }
                    fix = Some(want);
                }
                let Some(one) = fix else {
                    continue;
                };
                let v = if one { 1.0 } else { 0.0 };
                lower[j] = v;
                upper[j] = v;
                fixed.push((j, one));
                // Activities of this row change too; revisit it with the rest.
                for &r in &self.col_rows[j] {
                    if !queued[r] {
                        queued[r] = true;
                        queue.push(r);
                    }
                }
            }
        }
        Propagation::Fixed(fixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_forbids_items_that_no_longer_fit() {
        let mut m = MilpModel::new("p");
        let x: Vec<usize> = (0..3).map(|i| m.add_binary(format!("x{i}"), 0.0).unwrap()).collect();
        let u = m.add_binary("u", 1.0).unwrap();
        m.add_constraint("w", vec![(x[0], 60.0), (x[1], 30.0), (x[2], 55.0)], Relation::Le, 110.0)
            .unwrap();
        m.add_constraint("one", vec![(x[2], 1.0), (u, 1.0)], Relation::Eq, 1.0)
            .unwrap();
        let p = Propagator::new(&m);
        let (mut lo, mut up) = (vec![0.0; 4], vec![1.0; 4]);
        lo[x[0]] = 1.0;
        let Propagation::Fixed(f) = p.run(&mut lo, &mut up) else {
            panic!("feasible")
        };
        // x2 no longer fits, so the rejection column must take the caller.
        assert_eq!(f, vec![(x[2], false), (u, true)]);
        assert_eq!((lo[x[1]], up[x[1]]), (0.0, 1.0));
    }

    #[test]
    fn detects_conflicts() {
        let mut m = MilpModel::new("p");
        let a = m.add_binary("a", 0.0).unwrap();
        let b = m.add_binary("b", 0.0).unwrap();
        m.add_constraint("c", vec![(a, 1.0), (b, 1.0)], Relation::Le, 1.0)
            .unwrap();
        m.add_constraint("d", vec![(a, 1.0), (b, 1.0)], Relation::Ge, 2.0)
            .unwrap();
        let p = Propagator::new(&m);
        assert!(matches!(
            p.run(&mut [0.0, 0.0], &mut [1.0, 1.0]),
            Propagation::Infeasible
        ));
    }

    #[test]
    fn fixings_never_cut_feasible_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(2..7);
            let mut m = MilpModel::new("r");
            for i in 0..n {
                m.add_binary(format!("x{i}"), 0.0).unwrap();
            }
            for r in 0..3 {
                let terms: Vec<(usize, f64)> = (0..n).map(|j| (j, rng.random_range(-3..=5) as f64)).collect();
                let rel = [Relation::Le, Relation::Ge, Relation::Eq][rng.random_range(0..3)];
                m.add_constraint(format!("r{r}"), terms, rel, rng.random_range(-2..=6) as f64)
                    .unwrap();
            }
            let (mut lo, mut up) = (vec![0.0; n], vec![1.0; n]);
            if rng.random_bool(0.5) {
                lo[0] = 1.0;
            }
            let base_lo = lo.clone();
            let outcome = Propagator::new(&m).run(&mut lo, &mut up);
            for mask in 0u32..(1 << n) {
                let x: Vec<f64> = (0..n).map(|j| f64::from((mask >> j) & 1)).collect();
                if x.iter().zip(&base_lo).any(|(v, l)| v < l) || !m.is_feasible(&x, 1e-9) {
                    continue;
                }
                match &outcome {
                    Propagation::Infeasible => panic!("feasible point {x:?} exists"),
                    Propagation::Fixed(_) => {
                        assert!(x.iter().zip(lo.iter().zip(&up)).all(|(v, (l, u))| v >= l && v <= u))
                    }
                }
            }
        }
    }
}
