//! Best-bound-first branch-and-bound over the LP relaxation.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::cuts::lifted_cardinality_cuts;
use super::dual::{Basis, DualLp, DualStatus, Snapshot};
use super::model::{MilpModel, VarKind};
use super::propagate::{Propagation, Propagator};
use super::simplex::{solve_with_bounds, LpStatus};
use super::MilpError;

pub const INTEGRALITY_TOL: f64 = 1e-6;
pub const GAP_CLOSED: f64 = 1e-6;
const FEASIBILITY_TOL: f64 = 1e-9;
const DEFAULT_NODE_LIMIT: u64 = 10_000_000;
const SNAPSHOT_BUDGET: usize = 4 << 20;

/// Stopping criteria of a solve. `None` means "no limit" except for the node
/// count, which always has a finite internal cap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveLimits {
    /// Seconds.
    #[serde(default)]
    pub time_limit: Option<f64>,
    /// Relative gap at which the search may stop early.
    #[serde(default)]
    pub gap_limit: Option<f64>,
    #[serde(default)]
    pub node_limit: Option<u64>,
}

impl SolveLimits {
    pub fn unlimited() -> SolveLimits {
        SolveLimits::default()
    }

    pub fn with_time_limit(mut self, seconds: f64) -> SolveLimits {
        self.time_limit = Some(seconds);
        self
    }

    pub fn with_node_limit(mut self, nodes: u64) -> SolveLimits {
        self.node_limit = Some(nodes);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MipStatus {
    Optimal,
    FeasibleWithinLimits,
    Infeasible,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub wall_time: f64,
    pub nodes: u64,
    pub simplex_iterations: u64,
}

impl SolveStats {
    pub fn absorb(&mut self, other: &SolveStats) {
        self.wall_time += other.wall_time;
        self.nodes += other.nodes;
        self.simplex_iterations += other.simplex_iterations;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MipSolution {
    pub status: MipStatus,
    pub objective: f64,
    pub values: Vec<f64>,
    pub best_bound: f64,
    /// `(objective - best_bound) / max(|objective|, 1)`.
    pub gap: f64,
    pub stats: SolveStats,
}

impl MipSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == MipStatus::Optimal
    }
}

pub fn relative_gap(objective: f64, bound: f64) -> f64 {
    ((objective - bound) / objective.abs().max(1.0)).max(0.0)
}

struct Node {
    bound: f64,
    id: u64,
    fixings: Vec<(usize, bool)>,
    warm: Option<Basis>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // BinaryHeap is a max-heap: smallest bound, then newest node, on top.
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then_with(|| self.id.cmp(&other.id))
    }
}

struct Incumbent {
    objective: f64,
    values: Vec<f64>,
}

/// Step between attainable objective values: when every cost on a binary is
/// an integer multiple of some `g` (after scaling by a power of ten) and
/// continuous columns carry no cost, any solution's objective lies on the
/// grid `constant + g * Z`.
pub(crate) fn objective_step(model: &MilpModel) -> Option<f64> {
    let costs = model.objective();
    let kinds = model.variables();
    if costs
        .iter()
        .zip(kinds)
        .any(|(&c, v)| v.kind == VarKind::Continuous && c != 0.0)
    {
        return None;
    }
    for scale in [1.0, 10.0, 100.0, 1000.0] {
        let mut g: u64 = 0;
        let mut ok = true;
        for (&c, v) in costs.iter().zip(kinds) {
            if v.kind != VarKind::Binary || c == 0.0 {
                continue;
            }
            let s = c.abs() * scale;
            let r = s.round();
            if (s - r).abs() > 1e-9 * s.max(1.0) || r > 1e12 {
                ok = false;
                break;
            }
            g = gcd(g, r as u64);
        }
        if ok {
            return (g > 0).then(|| g as f64 / scale);
        }
    }
    None
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Bound arithmetic shared by pruning and reporting.
struct Grid {
    constant: f64,
    step: Option<f64>,
}

impl Grid {
    /// Smallest attainable objective not below the relaxation value `z`.
    fn lift(&self, z: f64) -> f64 {
        match self.step {
            Some(g) if z.is_finite() => self.constant + g * ((z - self.constant) / g - 1e-6).ceil(),
            _ => z,
        }
    }

    /// Relaxation values at or above this cannot lead to a strictly better
    /// solution than `incumbent`.
    fn cutoff(&self, incumbent: f64) -> f64 {
        match self.step {
            Some(g) => incumbent - g + g * 1e-6,
            None => incumbent - GAP_CLOSED * incumbent.abs().max(1.0),
        }
    }

    fn prunes(&self, bound: f64, incumbent: f64) -> bool {
        match self.step {
            Some(g) => self.lift(bound) > incumbent - g * 0.5,
            None => relative_gap(incumbent, bound) <= GAP_CLOSED,
        }
    }
}

enum NodeLp {
    Optimal { objective: f64, values: Vec<f64> },
    Pruned,
}

/// Exact minimisation of `model` within `limits`.
///
/// Best-bound-first search with plunging: after a node branches, the child
/// agreeing with the incumbent (or with rounding, before one exists) is
/// solved next from the parent's tableau, and its sibling is queued with the
/// parent's basis. Branching picks the binary whose relaxation value is
/// closest to one half, lowest index on ties. A feasible start point stored
/// on the model seeds the incumbent. When the objective only takes values on
/// a grid (integral costs), bounds are rounded up to that grid.
pub fn solve_mip(model: &MilpModel, limits: &SolveLimits) -> Result<MipSolution, MilpError> {
    model.validate()?;
    let started = Instant::now();
    let deadline = limits.time_limit.map(|s| started + Duration::from_secs_f64(s.max(0.0)));
    let node_limit = limits.node_limit.unwrap_or(DEFAULT_NODE_LIMIT);
    let grid = Grid {
        constant: model.objective_constant,
        step: objective_step(model),
    };

    let base_lower: Vec<f64> = model.variables().iter().map(|v| v.lower).collect();
    let base_upper: Vec<f64> = model.variables().iter().map(|v| v.upper).collect();
    let is_binary: Vec<bool> = model.variables().iter().map(|v| v.kind == VarKind::Binary).collect();

    let mut incumbent = model
        .start()
        .filter(|x| model.is_feasible(x, FEASIBILITY_TOL))
        .map(|x| Incumbent {
            objective: model.objective_value(x),
            values: x.to_vec(),
        });

    let cuts = lifted_cardinality_cuts(model);
    let strengthened;
    let relaxation = if cuts.is_empty() {
        model
    } else {
        let mut m = model.clone();
        for c in cuts {
            m.add_constraint(c.name, c.terms, c.relation, c.rhs)?;
        }
        strengthened = m;
        &strengthened
    };
    let propagator = Propagator::new(relaxation);
    let mut engine = DualLp::new(relaxation);
    // Tableaux of recently queued siblings, keyed by node id. Under
    // newest-first tie breaking these are usually popped soon after.
    let cache_capacity = engine
        .as_ref()
        .map_or(0, |e| (SNAPSHOT_BUDGET / e.snapshot_size().max(1)).clamp(1, 16));
    let mut cache: VecDeque<(u64, Snapshot)> = VecDeque::with_capacity(cache_capacity);
    let mut spare: Vec<Snapshot> = Vec::new();
    let mut stats = SolveStats::default();
    let mut next_id = 0u64;
    let mut open: BinaryHeap<Node> = BinaryHeap::new();
    let root = Node {
        bound: grid.lift(model.trivial_bound()),
        id: next_id,
        fixings: Vec::new(),
        warm: None,
    };
    next_id += 1;
    // A node whose parent's tableau is still loaded in `engine`.
    let mut plunge: Option<Node> = Some(root);

    let mut lower = base_lower.clone();
    let mut upper = base_upper.clone();
    let mut stopped_early = false;

    loop {
        let global = match (&plunge, open.peek()) {
            (Some(p), Some(t)) => p.bound.min(t.bound),
            (Some(p), None) => p.bound,
            (None, Some(t)) => t.bound,
            (None, None) => break,
        };
        if let Some(inc) = &incumbent {
            if grid.prunes(global, inc.objective) {
                plunge = None;
                open.clear();
                break;
            }
            if let Some(g) = limits.gap_limit {
                if relative_gap(inc.objective, global) <= g {
                    stopped_early = true;
                    break;
                }
            }
        }
        if stats.nodes >= node_limit || deadline.is_some_and(|d| Instant::now() >= d) {
            stopped_early = true;
            break;
        }
        let (node, warm_tableau) = match plunge.take() {
            Some(n) if n.id > 0 => (n, true),
            Some(n) => (n, false),
            None => (open.pop().expect("peeked"), false),
        };
        if let Some(inc) = &incumbent {
            if grid.prunes(node.bound, inc.objective) {
                continue;
            }
        }
        stats.nodes += 1;
        let cutoff = incumbent
            .as_ref()
            .map_or(f64::INFINITY, |inc| grid.cutoff(inc.objective));

        fill_bounds(&mut lower, &mut upper, &base_lower, &base_upper, &node.fixings);
        let Propagation::Fixed(implied) = propagator.run(&mut lower, &mut upper) else {
            if let Some(pos) = cache.iter().position(|(id, _)| *id == node.id) {
                let (_, snap) = cache.remove(pos).expect("position is in range");
                spare.push(snap);
            }
            continue;
        };
        let set_fixings = |e: &mut DualLp, list: &[(usize, bool)]| {
            for &(j, one) in list {
                let v = if one { 1.0 } else { 0.0 };
                e.set_bounds(j, v, v);
            }
        };
        let lp = match engine.as_mut() {
            Some(e) => {
                let before = e.iterations;
                if warm_tableau {
                    let last = node.fixings.last().expect("plunged nodes carry a fixing");
                    set_fixings(e, std::slice::from_ref(last));
                    set_fixings(e, &implied);
                } else if let Some(pos) = cache.iter().position(|(id, _)| *id == node.id) {
                    let (_, snap) = cache.remove(pos).expect("position is in range");
                    e.restore(&snap);
                    spare.push(snap);
                    let last = node.fixings.last().expect("queued children carry a fixing");
                    set_fixings(e, std::slice::from_ref(last));
                    set_fixings(e, &implied);
                } else {
                    if !e.load(&lower, &upper, node.warm.as_ref()) {
                        let ok = e.load(&lower, &upper, None);
                        debug_assert!(ok, "slack basis is dual feasible by construction");
                    }
                }
                let status = e.solve(cutoff);
                stats.simplex_iterations += e.iterations - before;
                match status {
                    DualStatus::Optimal => NodeLp::Optimal {
                        objective: e.objective(),
                        values: e.values().to_vec(),
                    },
                    DualStatus::Infeasible | DualStatus::Cutoff => NodeLp::Pruned,
                }
            }
            None => {
                let lp = solve_with_bounds(relaxation, &lower, &upper)?;
                stats.simplex_iterations += lp.iterations;
                match lp.status {
                    LpStatus::Infeasible { .. } => NodeLp::Pruned,
                    LpStatus::Unbounded => return Err(MilpError::Unbounded),
                    LpStatus::Optimal => NodeLp::Optimal {
                        objective: lp.objective,
                        values: lp.values,
                    },
                }
            }
        };
        let NodeLp::Optimal { objective, values } = lp else {
            continue;
        };
        let bound = grid.lift(objective).max(node.bound);
        if let Some(inc) = &incumbent {
            if grid.prunes(bound, inc.objective) {
                continue;
            }
        }

        // Reduced-cost fixing: moving a nonbasic binary off its bound costs
        // at least its reduced cost.
        let mut fixings = node.fixings;
        fixings.extend(implied);
        if let (Some(e), Some(inc)) = (engine.as_mut(), &incumbent) {
            let cut = grid.cutoff(inc.objective);
            let implied: Vec<(usize, bool)> = e
                .nonbasic_structurals()
                .filter(|&(j, d, at_upper)| is_binary[j] && objective + d.abs() >= cut && (d >= 0.0) != at_upper)
                .map(|(j, _, at_upper)| (j, at_upper))
                .collect();
            for &(j, one) in &implied {
                let v = if one { 1.0 } else { 0.0 };
                e.set_bounds(j, v, v);
            }
            fixings.extend(implied);
        }

        let branch = values
            .iter()
            .enumerate()
            .filter(|&(j, &v)| is_binary[j] && (v - v.round()).abs() > INTEGRALITY_TOL)
            .min_by(|&(ja, &va), &(jb, &vb)| (va - 0.5).abs().total_cmp(&(vb - 0.5).abs()).then(ja.cmp(&jb)))
            .map(|(j, &v)| (j, v));

        match branch {
            None => {
                let mut x = values;
                for (j, v) in x.iter_mut().enumerate() {
                    if is_binary[j] {
                        *v = v.round();
                    }
                }
                if !model.is_feasible(&x, FEASIBILITY_TOL) {
                    continue;
                }
                let objective = model.objective_value(&x);
                if incumbent.as_ref().is_none_or(|inc| objective < inc.objective) {
                    incumbent = Some(Incumbent { objective, values: x });
                }
            }
            Some((j, v)) => {
                let prefer_one = match &incumbent {
                    Some(inc) => inc.values[j] > 0.5,
                    None => v >= 0.5,
                };
                let warm = engine.as_ref().map(|e| e.basis());
                let mut child = |one: bool, warm: Option<Basis>| {
                    let mut fixings = fixings.clone();
                    fixings.push((j, one));
                    let n = Node {
                        bound,
                        id: next_id,
                        fixings,
                        warm,
                    };
                    next_id += 1;
                    n
                };
                let first = child(prefer_one, None);
                let second = child(!prefer_one, warm);
                if let Some(e) = engine.as_ref() {
                    let mut snap = if cache.len() == cache_capacity {
                        cache.pop_front().map(|(_, s)| s).unwrap_or_default()
                    } else {
                        spare.pop().unwrap_or_default()
                    };
                    e.save(&mut snap);
                    cache.push_back((second.id, snap));
                }
                if engine.is_some() {
                    plunge = Some(first);
                } else {
                    open.push(first);
                }
                open.push(second);
            }
        }
    }

    stats.wall_time = started.elapsed().as_secs_f64();
    let open_bound = open
        .peek()
        .map(|n| n.bound)
        .into_iter()
        .chain(plunge.as_ref().map(|n| n.bound))
        .min_by(f64::total_cmp);
    let Some(inc) = incumbent else {
        if stopped_early {
            return Err(MilpError::NoIncumbent);
        }
        return Ok(MipSolution {
            status: MipStatus::Infeasible,
            objective: f64::INFINITY,
            values: Vec::new(),
            best_bound: f64::INFINITY,
            gap: 0.0,
            stats,
        });
    };
    let best_bound = match open_bound {
        Some(b) if stopped_early => b.min(inc.objective),
        _ => inc.objective,
    };
    let gap = relative_gap(inc.objective, best_bound);
    let status = if !stopped_early || gap <= GAP_CLOSED {
        MipStatus::Optimal
    } else {
        MipStatus::FeasibleWithinLimits
    };
    Ok(MipSolution {
        status,
        objective: inc.objective,
        values: inc.values,
        best_bound,
        gap,
        stats,
    })
}

fn fill_bounds(
    lower: &mut [f64],
    upper: &mut [f64],
    base_lower: &[f64],
    base_upper: &[f64],
    fixings: &[(usize, bool)],
) {
    lower.copy_from_slice(base_lower);
    upper.copy_from_slice(base_upper);
    for &(j, one) in fixings {
        let v = if one { 1.0 } else { 0.0 };
        lower[j] = v;
        upper[j] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::model::Relation;

    fn knapsack() -> MilpModel {
        // max 10a + 13b + 7c + 8d  s.t. 4a + 6b + 3c + 5d <= 10
        let mut m = MilpModel::new("knap");
        let vals = [10.0, 13.0, 7.0, 8.0];
        let wts = [4.0, 6.0, 3.0, 5.0];
        let ids: Vec<usize> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| m.add_binary(format!("x{i}"), -v).unwrap())
            .collect();
        m.add_constraint(
            "w",
            ids.iter().zip(wts).map(|(&j, w)| (j, w)).collect(),
            Relation::Le,
            10.0,
        )
        .unwrap();
        m.set_start(vec![0.0; 4]);
        m
    }

    #[test]
    fn solves_small_knapsack() {
        let s = solve_mip(&knapsack(), &SolveLimits::default()).unwrap();
        assert_eq!(s.status, MipStatus::Optimal);
        // {a, b}: 23 with weight 10; {b, c}: 20; {a, c}: 17 -> 23.
        assert_eq!(s.objective, -23.0);
        assert_eq!(s.values, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.gap, 0.0);
    }

    #[test]
    fn zero_node_budget_returns_start() {
        let s = solve_mip(&knapsack(), &SolveLimits::default().with_node_limit(0)).unwrap();
        assert_eq!(s.status, MipStatus::FeasibleWithinLimits);
        assert_eq!(s.objective, 0.0);
        assert!(s.best_bound <= -23.0);
        assert!(s.gap > 0.0);
    }

    #[test]
    fn integral_relaxation_needs_one_node() {
        let mut m = MilpModel::new("easy");
        let a = m.add_binary("a", 3.0).unwrap();
        let b = m.add_binary("b", 1.0).unwrap();
        m.add_constraint("one", vec![(a, 1.0), (b, 1.0)], Relation::Eq, 1.0)
            .unwrap();
        let s = solve_mip(&m, &SolveLimits::default()).unwrap();
        assert_eq!(s.status, MipStatus::Optimal);
        assert_eq!(s.stats.nodes, 1);
        assert_eq!(s.objective, 1.0);
    }

    #[test]
    fn infeasible_model() {
        let mut m = MilpModel::new("bad");
        let a = m.add_binary("a", 1.0).unwrap();
        let b = m.add_binary("b", 1.0).unwrap();
        m.add_constraint("two", vec![(a, 1.0), (b, 1.0)], Relation::Ge, 1.5)
            .unwrap();
        m.add_constraint("cap", vec![(a, 1.0), (b, 1.0)], Relation::Le, 1.2)
            .unwrap();
        let s = solve_mip(&m, &SolveLimits::default()).unwrap();
        assert_eq!(s.status, MipStatus::Infeasible);
    }

    #[test]
    fn deterministic_node_count() {
        let a = solve_mip(&knapsack(), &SolveLimits::default()).unwrap();
        let b = solve_mip(&knapsack(), &SolveLimits::default()).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.stats.nodes, b.stats.nodes);
        assert_eq!(a.stats.simplex_iterations, b.stats.simplex_iterations);
    }
}
