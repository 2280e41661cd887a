//! Root strengthening: lifted cardinality inequalities.
//!
//! When a `<=` row with unit coefficients (`sum x <= L`) and a `<=` row with
//! positive weights (`sum w x <= W`) range over the same binaries, a heavy
//! item leaves room for few others, so `sum x + sum_b beta_b x_b <= L` holds
//! for suitable `beta`. Coefficients are lifted one item at a time from the
//! heaviest down; each lifting step solves its small subproblem exactly, so
//! every integer point of the two rows satisfies the result.

use std::collections::HashMap;

use super::model::{Constraint, MilpModel, Relation, VarKind};

const MAX_LIFTED: usize = 12;
const FIT_TOL: f64 = 1e-9;

fn integral_rhs(rhs: f64) -> Option<f64> {
    let l = (rhs + 1e-9).floor();
    (l >= 1.0).then_some(l)
}

/// Largest number of `items` (ascending weights) that fit in `capacity`
/// using at most `slots` of them.
fn fill_count(weights: &[f64], capacity: f64, slots: f64) -> f64 {
    let mut used = 0.0;
    let mut count = 0.0;
    for &w in weights {
        if count + 1.0 > slots || used + w > capacity + FIT_TOL * (1.0 + capacity.abs()) {
            break;
        }
        used += w;
        count += 1.0;
    }
    count
}

/// Lifted coefficients for the pair `sum x <= l`, `sum w x <= cap` over
/// `items` (column, weight). Returns `None` when nothing lifts.
fn lift(items: &[(usize, f64)], l: f64, cap: f64) -> Option<Vec<(usize, f64)>> {
    let mut order: Vec<(usize, f64)> = items.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut lifted: Vec<(usize, f64, f64)> = Vec::new(); // (column, weight, extra)
    for pos in (0..order.len()).rev() {
        if lifted.len() >= MAX_LIFTED {
            break;
        }
        let (col, w) = order[pos];
        let small: Vec<f64> = order[..pos].iter().map(|&(_, w)| w).collect();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << lifted.len()) {
            let mut used = w;
            let mut count = 1.0;
            let mut value = 0.0;
            for (i, &(_, wi, extra)) in lifted.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    used += wi;
                    count += 1.0;
                    value += 1.0 + extra;
                }
            }
            if count > l || used > cap + FIT_TOL * (1.0 + cap.abs()) {
                continue;
            }
            value += fill_count(&small, cap - used, l - count);
            best = best.max(value);
        }
        // An item that cannot be chosen at all may take the whole budget.
        let coef = if best == f64::NEG_INFINITY { l } else { l - best };
        if coef <= 1.0 {
            break;
        }
        lifted.push((col, w, coef - 1.0));
    }
    if lifted.is_empty() {
        return None;
    }
    let extra: HashMap<usize, f64> = lifted.iter().map(|&(c, _, e)| (c, e)).collect();
    Some(
        items
            .iter()
            .map(|&(c, _)| (c, 1.0 + extra.get(&c).copied().unwrap_or(0.0)))
            .collect(),
    )
}

/// Valid inequalities for `model`, one per matching row pair.
pub(crate) fn lifted_cardinality_cuts(model: &MilpModel) -> Vec<Constraint> {
    let vars = model.variables();
    let binary_support = |c: &Constraint| {
        c.relation == Relation::Le
            && !c.terms.is_empty()
            && c.terms.iter().all(|&(j, _)| vars[j].kind == VarKind::Binary)
    };
    let support = |c: &Constraint| {
        let mut s: Vec<usize> = c.terms.iter().map(|&(j, _)| j).collect();
        s.sort_unstable();
        s
    };
    let mut cardinality: HashMap<Vec<usize>, f64> = HashMap::new();
    for c in model.constraints() {
        if binary_support(c) && c.terms.iter().all(|&(_, a)| a == 1.0) {
            if let Some(l) = integral_rhs(c.rhs) {
                let e = cardinality.entry(support(c)).or_insert(l);
                *e = e.min(l);
            }
        }
    }
    let mut cuts = Vec::new();
    for c in model.constraints() {
        if !binary_support(c) || c.terms.iter().any(|&(_, a)| a <= 0.0) || c.terms.iter().all(|&(_, a)| a == 1.0) {
            continue;
        }
        let Some(&l) = cardinality.get(&support(c)) else {
            continue;
        };
        if let Some(terms) = lift(&c.terms, l, c.rhs) {
            cuts.push(Constraint {
                name: format!("lift_{}", c.name),
                terms,
                relation: Relation::Le,
                rhs: l,
            });
        }
    }
    cuts
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every 0/1 point satisfying both rows satisfies the cut.
    fn check_valid(weights: &[f64], l: f64, cap: f64) {
        let items: Vec<(usize, f64)> = weights.iter().copied().enumerate().collect();
        let Some(cut) = lift(&items, l, cap) else {
            return;
        };
        let n = weights.len();
        for mask in 0u32..(1 << n) {
            let chosen: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let w: f64 = chosen.iter().map(|&i| weights[i]).sum();
            if chosen.len() as f64 > l || w > cap {
                continue;
            }
            let lhs: f64 = chosen.iter().map(|&i| cut[i].1).sum();
            assert!(
                lhs <= l + 1e-12,
                "{weights:?} l={l} cap={cap} point {chosen:?} lhs {lhs}"
            );
        }
    }

    #[test]
    fn heavy_item_lifts() {
        // With the 80-minute item in, only one 10-minute item still fits.
        let items = [(0, 10.0), (1, 10.0), (2, 10.0), (3, 80.0)];
        let cut = lift(&items, 3.0, 95.0).unwrap();
        assert_eq!(cut, vec![(0, 1.0), (1, 1.0), (2, 1.0), (3, 2.0)]);
    }

    #[test]
    fn nothing_to_lift_when_items_are_light() {
        assert_eq!(lift(&[(0, 1.0), (1, 1.0), (2, 1.0)], 2.0, 10.0), None);
    }

    #[test]
    fn lifted_cuts_are_valid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.random_range(2..=9);
            let weights: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(30.0..95.0)
                    } else {
                        rng.random_range(4.0..20.0)
                    }
                })
                .collect();
            let l = rng.random_range(1..=n) as f64;
            let cap = rng.random_range(20.0..120.0);
            check_valid(&weights, l, cap);
        }
    }

    #[test]
    fn detects_row_pairs() {
        let mut m = MilpModel::new("pair");
        let x: Vec<usize> = (0..4).map(|i| m.add_binary(format!("x{i}"), 1.0).unwrap()).collect();
        m.add_constraint("cnt", x.iter().map(|&j| (j, 1.0)).collect(), Relation::Le, 3.0)
            .unwrap();
        m.add_constraint(
            "wt",
            x.iter().zip([10.0, 10.0, 10.0, 80.0]).map(|(&j, w)| (j, w)).collect(),
            Relation::Le,
            95.0,
        )
        .unwrap();
        let cuts = lifted_cardinality_cuts(&m);
        assert_eq!(cuts.len(), 1);
        assert_eq!(cuts[0].name, "lift_wt");
        assert_eq!(cuts[0].rhs, 3.0);
    }
}
