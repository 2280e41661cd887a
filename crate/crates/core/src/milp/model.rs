use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MilpError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }

    pub fn is_satisfied(&self, x: &[f64], tol: f64) -> bool {
        let lhs = self.activity(x);
        match self.relation {
            Relation::Le => lhs <= self.rhs + tol,
            Relation::Ge => lhs >= self.rhs - tol,
            Relation::Eq => (lhs - self.rhs).abs() <= tol,
        }
    }
}

/// A minimisation model over bounded binary and continuous variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MilpModel {
    pub name: String,
    variables: Vec<Variable>,
    objective: Vec<f64>,
    pub objective_constant: f64,
    constraints: Vec<Constraint>,
    names: HashMap<String, usize>,
    start: Option<Vec<f64>>,
}

impl MilpModel {
    pub fn new(name: impl Into<String>) -> MilpModel {
        MilpModel {
            name: name.into(),
            ..MilpModel::default()
        }
    }

    pub fn add_binary(&mut self, name: impl Into<String>, cost: f64) -> Result<usize, MilpError> {
        self.add_variable(name.into(), VarKind::Binary, 0.0, 1.0, cost)
    }

    pub fn add_continuous(
        &mut self,
        name: impl Into<String>,
        lower: f64,
        upper: f64,
        cost: f64,
    ) -> Result<usize, MilpError> {
        self.add_variable(name.into(), VarKind::Continuous, lower, upper, cost)
    }

    fn add_variable(
        &mut self,
        name: String,
        kind: VarKind,
        lower: f64,
        upper: f64,
        cost: f64,
    ) -> Result<usize, MilpError> {
        if lower.is_nan() || upper.is_nan() || lower > upper || lower == f64::INFINITY || upper == f64::NEG_INFINITY {
            return Err(MilpError::InvalidBounds(name));
        }
        if self.names.contains_key(&name) {
            return Err(MilpError::DuplicateName(name));
        }
        let idx = self.variables.len();
        self.names.insert(name.clone(), idx);
        self.variables.push(Variable {
            name,
            kind,
            lower,
            upper,
        });
        self.objective.push(cost);
        Ok(idx)
    }

    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        terms: Vec<(usize, f64)>,
        relation: Relation,
        rhs: f64,
    ) -> Result<usize, MilpError> {
        let name = name.into();
        if let Some(&(j, _)) = terms.iter().find(|&&(j, _)| j >= self.variables.len()) {
            return Err(MilpError::UnknownVariable(format!("{name}: column {j}")));
        }
        self.constraints.push(Constraint {
            name,
            terms,
            relation,
            rhs,
        });
        Ok(self.constraints.len() - 1)
    }

    /// Known feasible point used to seed the incumbent.
    pub fn set_start(&mut self, values: Vec<f64>) {
        self.start = Some(values);
    }

    pub fn start(&self) -> Option<&[f64]> {
        self.start.as_deref()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.names.get(name).copied()
    }

    pub fn binaries(&self) -> impl Iterator<Item = usize> + '_ {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VarKind::Binary)
            .map(|(j, _)| j)
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective_constant + self.objective.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Bounds, integrality and every constraint within `tol`.
    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.variables.len()
            && self.variables.iter().zip(x).all(|(v, &val)| {
                val >= v.lower - tol
                    && val <= v.upper + tol
                    && (v.kind == VarKind::Continuous || (val - val.round()).abs() <= tol)
            })
            && self.constraints.iter().all(|c| c.is_satisfied(x, tol))
    }

    /// Lower bound on the objective implied by the variable bounds alone.
    pub fn trivial_bound(&self) -> f64 {
        self.objective_constant
            + self
                .objective
                .iter()
                .zip(&self.variables)
                .map(|(&c, v)| if c >= 0.0 { c * v.lower } else { c * v.upper })
                .sum::<f64>()
    }

    pub fn validate(&self) -> Result<(), MilpError> {
        for v in &self.variables {
            if v.kind == VarKind::Binary && (v.lower != 0.0 || v.upper != 1.0) {
                return Err(MilpError::InvalidBounds(v.name.clone()));
            }
        }
        for c in &self.constraints {
            if let Some(&(j, _)) = c.terms.iter().find(|&&(j, _)| j >= self.variables.len()) {
                return Err(MilpError::UnknownVariable(format!("{}: column {j}", c.name)));
            }
        }
        Ok(())
    }
}
