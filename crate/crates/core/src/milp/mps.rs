//! MPS export and a small reader for round-trip checks.
//!
//! Fixed-format MPS is written when every name fits in eight characters and
//! every number has an exact representation in twelve; otherwise the writer
//! switches to free format.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use super::model::{MilpModel, Relation, VarKind};
use super::MilpError;

const OBJ_ROW: &str = "COST";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpsFormat {
    Fixed,
    Free,
}

fn relation_code(r: Relation) -> &'static str {
    match r {
        Relation::Le => "L",
        Relation::Ge => "G",
        Relation::Eq => "E",
    }
}

fn number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        // Shortest representation that parses back to the same value.
        format!("{v:?}")
    }
}

fn short_unique<'a>(mut names: impl Iterator<Item = &'a str>) -> bool {
    let mut seen = HashSet::new();
    names.all(|n| n.len() <= 8 && !n.contains(' ') && seen.insert(n))
}

fn fits_fixed(model: &MilpModel) -> bool {
    let vars_ok = short_unique(model.variables().iter().map(|v| v.name.as_str()));
    let rows_ok = short_unique(std::iter::once(OBJ_ROW).chain(model.constraints().iter().map(|c| c.name.as_str())));
    let nums_ok = model.objective().iter().all(|&c| number(c).len() <= 12)
        && model
            .constraints()
            .iter()
            .all(|c| number(c.rhs).len() <= 12 && c.terms.iter().all(|&(_, a)| number(a).len() <= 12))
        && model
            .variables()
            .iter()
            .all(|v| number(v.lower).len() <= 12 && (v.upper.is_infinite() || number(v.upper).len() <= 12))
        && number(-model.objective_constant).len() <= 12;
    vars_ok && rows_ok && nums_ok
}

/// Format `export_mps` will choose for this model.
pub fn mps_format(model: &MilpModel) -> MpsFormat {
    if fits_fixed(model) {
        MpsFormat::Fixed
    } else {
        MpsFormat::Free
    }
}

struct Writer {
    fixed: bool,
    out: String,
}

impl Writer {
    fn section(&mut self, name: &str) {
        self.out.push_str(name);
        self.out.push('\n');
    }

    /// Data line: optional code, a name, then up to two (name, value) pairs.
    fn line(&mut self, code: &str, name: &str, pairs: &[(&str, String)]) {
        if self.fixed {
            let mut l = format!(" {code:<2} {name:<8}");
            for (i, (n, v)) in pairs.iter().enumerate() {
                let pad = if i == 0 { "  " } else { "   " };
                let _ = write!(l, "{pad}{n:<8}  {v:>12}");
            }
            self.out.push_str(l.trim_end());
        } else {
            let mut l = format!(" {code} {name}");
            for (n, v) in pairs {
                let _ = write!(l, " {n} {v}");
            }
            self.out.push_str(&l);
        }
        self.out.push('\n');
    }
}

pub fn export_mps(model: &MilpModel) -> Result<Vec<u8>, MilpError> {
    model.validate()?;
    let fixed = fits_fixed(model);
    let mut w = Writer {
        fixed,
        out: String::new(),
    };
    let _ = writeln!(w.out, "NAME          {}", model.name.replace(' ', "_"));
    w.section("ROWS");
    w.line("N", OBJ_ROW, &[]);
    for c in model.constraints() {
        w.line(relation_code(c.relation), &c.name, &[]);
    }

    let mut by_column: Vec<Vec<(usize, f64)>> = vec![Vec::new(); model.num_vars()];
    for (i, c) in model.constraints().iter().enumerate() {
        for &(j, a) in &c.terms {
            by_column[j].push((i, a));
        }
    }
    w.section("COLUMNS");
    for (j, v) in model.variables().iter().enumerate() {
        let mut entries: Vec<(&str, String)> = Vec::new();
        let c = model.objective()[j];
        if c != 0.0 {
            entries.push((OBJ_ROW, number(c)));
        }
        for &(i, a) in &by_column[j] {
            if a != 0.0 {
                entries.push((model.constraints()[i].name.as_str(), number(a)));
            }
        }
        if entries.is_empty() {
            // Keep the column declared even if it appears nowhere.
            entries.push((OBJ_ROW, "0".to_string()));
        }
        for pair in entries.chunks(2) {
            w.line("", &v.name, pair);
        }
    }

    w.section("RHS");
    let mut rhs: Vec<(&str, String)> = model
        .constraints()
        .iter()
        .filter(|c| c.rhs != 0.0)
        .map(|c| (c.name.as_str(), number(c.rhs)))
        .collect();
    if model.objective_constant != 0.0 {
        rhs.insert(0, (OBJ_ROW, number(-model.objective_constant)));
    }
    for pair in rhs.chunks(2) {
        w.line("", "RHS", pair);
    }

    w.section("BOUNDS");
    for v in model.variables() {
        match v.kind {
            VarKind::Binary => w.line("BV", "BND", &[(v.name.as_str(), String::new())]),
            VarKind::Continuous => {
                if v.lower != 0.0 {
                    w.line("LO", "BND", &[(v.name.as_str(), number(v.lower))]);
                }
                if v.upper.is_finite() {
                    w.line("UP", "BND", &[(v.name.as_str(), number(v.upper))]);
                }
            }
        }
    }
    w.section("ENDATA");
    Ok(w.out.into_bytes())
}

/// Reads the subset of MPS written by [`export_mps`] (either format).
pub fn parse_mps(bytes: &[u8]) -> Result<MilpModel, MilpError> {
    let text = std::str::from_utf8(bytes).map_err(|e| MilpError::Mps(e.to_string()))?;
    let bad = |line: usize, msg: &str| MilpError::Mps(format!("line {}: {msg}", line + 1));

    let mut name = String::new();
    let mut section = "";
    let mut row_kind: Vec<(String, Option<Relation>)> = Vec::new();
    let mut row_index: HashMap<String, usize> = HashMap::new();
    let mut columns: Vec<(String, Vec<(usize, f64)>, f64)> = Vec::new();
    let mut column_index: HashMap<String, usize> = HashMap::new();
    let mut rhs: HashMap<usize, f64> = HashMap::new();
    let mut objective_constant = 0.0;
    let mut bounds: HashMap<usize, (VarKind, f64, f64)> = HashMap::new();

    let parse_num = |line: usize, s: &str| s.parse::<f64>().map_err(|_| bad(line, "bad number"));

    for (ln, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() || raw.starts_with('*') {
            continue;
        }
        if !raw.starts_with(' ') {
            let mut it = raw.split_whitespace();
            section = match it.next() {
                Some("NAME") => {
                    name = it.next().unwrap_or("").to_string();
                    "NAME"
                }
                Some("ROWS") => "ROWS",
                Some("COLUMNS") => "COLUMNS",
                Some("RHS") => "RHS",
                Some("BOUNDS") => "BOUNDS",
                Some("ENDATA") => break,
                _ => return Err(bad(ln, "unknown section")),
            };
            continue;
        }
        let tok: Vec<&str> = raw.split_whitespace().collect();
        match section {
            "ROWS" => {
                let [code, rname] = tok[..] else {
                    return Err(bad(ln, "ROWS entry needs two fields"));
                };
                let rel = match code {
                    "N" => None,
                    "L" => Some(Relation::Le),
                    "G" => Some(Relation::Ge),
                    "E" => Some(Relation::Eq),
                    _ => return Err(bad(ln, "unknown row type")),
                };
                row_index.insert(rname.to_string(), row_kind.len());
                row_kind.push((rname.to_string(), rel));
            }
            "COLUMNS" => {
                if tok.len() != 3 && tok.len() != 5 {
                    return Err(bad(ln, "COLUMNS entry needs one or two pairs"));
                }
                let cname = tok[0];
                let j = *column_index.entry(cname.to_string()).or_insert_with(|| {
                    columns.push((cname.to_string(), Vec::new(), 0.0));
                    columns.len() - 1
                });
                for pair in tok[1..].chunks(2) {
                    let r = *row_index.get(pair[0]).ok_or_else(|| bad(ln, "unknown row"))?;
                    let v = parse_num(ln, pair[1])?;
                    if row_kind[r].1.is_none() {
                        columns[j].2 += v;
                    } else {
                        columns[j].1.push((r, v));
                    }
                }
            }
            "RHS" => {
                if tok.len() != 3 && tok.len() != 5 {
                    return Err(bad(ln, "RHS entry needs one or two pairs"));
                }
                for pair in tok[1..].chunks(2) {
                    let r = *row_index.get(pair[0]).ok_or_else(|| bad(ln, "unknown row"))?;
                    let v = parse_num(ln, pair[1])?;
                    if row_kind[r].1.is_none() {
                        objective_constant = -v;
                    } else {
                        rhs.insert(r, v);
                    }
                }
            }
            "BOUNDS" => {
                if tok.len() < 3 {
                    return Err(bad(ln, "BOUNDS entry too short"));
                }
                let j = *column_index.get(tok[2]).ok_or_else(|| bad(ln, "unknown column"))?;
                let e = bounds.entry(j).or_insert((VarKind::Continuous, 0.0, f64::INFINITY));
                match tok[0] {
                    "BV" => *e = (VarKind::Binary, 0.0, 1.0),
                    "LO" => e.1 = parse_num(ln, tok.get(3).ok_or_else(|| bad(ln, "missing value"))?)?,
                    "UP" => e.2 = parse_num(ln, tok.get(3).ok_or_else(|| bad(ln, "missing value"))?)?,
                    "FX" => {
                        let v = parse_num(ln, tok.get(3).ok_or_else(|| bad(ln, "missing value"))?)?;
                        e.1 = v;
                        e.2 = v;
                    }
                    _ => return Err(bad(ln, "unsupported bound type")),
                }
            }
            _ => return Err(bad(ln, "data outside a section")),
        }
    }

    let mut model = MilpModel::new(name);
    model.objective_constant = objective_constant;
    let mut terms_by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); row_kind.len()];
    for (j, (cname, entries, cost)) in columns.iter().enumerate() {
        let (kind, lo, up) = bounds
            .get(&j)
            .copied()
            .unwrap_or((VarKind::Continuous, 0.0, f64::INFINITY));
        let idx = match kind {
            VarKind::Binary => model.add_binary(cname.clone(), *cost)?,
            VarKind::Continuous => model.add_continuous(cname.clone(), lo, up, *cost)?,
        };
        for &(r, v) in entries {
            terms_by_row[r].push((idx, v));
        }
    }
    for (r, (rname, rel)) in row_kind.iter().enumerate() {
        if let Some(rel) = rel {
            let terms = std::mem::take(&mut terms_by_row[r]);
            model.add_constraint(rname.clone(), terms, *rel, rhs.get(&r).copied().unwrap_or(0.0))?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::{solve_mip, SolveLimits};

    #[test]
    fn objective_only_model() {
        let mut m = MilpModel::new("empty");
        m.add_binary("x", 2.0).unwrap();
        let text = String::from_utf8(export_mps(&m).unwrap()).unwrap();
        assert!(text.starts_with("NAME"));
        assert!(text.contains(" N  COST"));
        assert!(text.contains(" BV BND       x"));
        assert!(text.trim_end().ends_with("ENDATA"));
        let back = parse_mps(text.as_bytes()).unwrap();
        assert_eq!(back.num_vars(), 1);
        assert!(back.constraints().is_empty());
    }

    #[test]
    fn fixed_format_columns() {
        let mut m = MilpModel::new("t");
        let x = m.add_binary("x1", -3.5).unwrap();
        let y = m.add_continuous("y", 0.0, 4.0, 1.0).unwrap();
        m.add_constraint("c1", vec![(x, 1.0), (y, 2.0)], Relation::Le, 3.0)
            .unwrap();
        assert_eq!(mps_format(&m), MpsFormat::Fixed);
        let text = String::from_utf8(export_mps(&m).unwrap()).unwrap();
        // Fields start at columns 2, 5, 15, 25 (1-based).
        let line = text.lines().find(|l| l.starts_with("    x1")).unwrap();
        assert_eq!(&line[4..12], "x1      ");
        assert_eq!(&line[14..22], "COST    ");
        assert_eq!(line[24..36].trim(), "-3.5");
        assert_eq!(&line[39..47], "c1      ");
        let back = parse_mps(text.as_bytes()).unwrap();
        assert_eq!(back.variables(), m.variables());
        assert_eq!(back.constraints(), m.constraints());
    }

    #[test]
    fn long_names_switch_to_free_format() {
        let mut m = MilpModel::new("long");
        let a = m.add_binary("assignment_var_1", 1.0).unwrap();
        let b = m.add_binary("assignment_var_2", 2.0).unwrap();
        m.add_constraint("one", vec![(a, 1.0), (b, 1.0)], Relation::Eq, 1.0)
            .unwrap();
        assert_eq!(mps_format(&m), MpsFormat::Free);
        let bytes = export_mps(&m).unwrap();
        let back = parse_mps(&bytes).unwrap();
        let s1 = solve_mip(&m, &SolveLimits::default()).unwrap();
        let s2 = solve_mip(&back, &SolveLimits::default()).unwrap();
        assert_eq!(s1.objective, s2.objective);
    }

    #[test]
    fn inexact_coefficients_switch_to_free_format() {
        let mut m = MilpModel::new("third");
        let a = m.add_binary("a", 1.0 / 3.0).unwrap();
        m.add_constraint("r", vec![(a, 1.0)], Relation::Ge, 1.0).unwrap();
        assert_eq!(mps_format(&m), MpsFormat::Free);
        let back = parse_mps(&export_mps(&m).unwrap()).unwrap();
        assert_eq!(back.objective()[0], 1.0 / 3.0);
    }
}
