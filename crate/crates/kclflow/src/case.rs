//! Ingest of MATPOWER-style case text and the canonical grid JSON schema.
//!
//! Only the columns the flow model consumes are lowered into a [`Grid`]:
//! bus number/type/Pd/Qd/Vm/Va, generator bus/Pg/Qg/Vg/status, and branch
//! fbus/tbus/r/x/status. Ratings, taps, shunts, and areas are ignored;
//! the toolkit's edge model is series {r, x} only.

use crate::grid::{Branch, Bus, BusKind, Grid, GridError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("case file is missing the {0} table")]
    MissingTable(&'static str),
    #[error("no slack bus (type 3) in the bus table")]
    NoSlack,
    #[error("multiple slack buses in the bus table")]
    MultipleSlack,
    #[error("row references unknown bus number {0}")]
    DanglingReference(i64),
    #[error("unknown bus type code {0}")]
    UnknownBusType(i64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct RawBus {
    pub number: i64,
    pub bus_type: i64,
    pub pd: f64,
    pub qd: f64,
    pub vm: f64,
    /// Degrees, as in the case format.
    pub va: f64,
}

#[derive(Debug, Clone)]
pub struct RawGen {
    pub bus: i64,
    pub pg: f64,
    pub qg: f64,
    pub vg: f64,
    pub status: bool,
}

#[derive(Debug, Clone)]
pub struct RawBranch {
    pub from: i64,
    pub to: i64,
    pub r: f64,
    pub x: f64,
    pub status: bool,
}

/// Parsed case tables, still in MW/MVAr with original bus numbering.
#[derive(Debug, Clone)]
pub struct RawCase {
    pub base_mva: f64,
    pub buses: Vec<RawBus>,
    pub gens: Vec<RawGen>,
    pub branches: Vec<RawBranch>,
}

/// Parses case text containing `baseMVA` and bracketed `bus`, `gen`, and
/// `branch` matrices, one row per line. Comment lines (`%`) and unused
/// trailing columns are ignored.
pub fn parse_case_text(source: &str) -> Result<RawCase, CaseError> {
    let mut base_mva: Option<f64> = None;
    let mut tables: BTreeMap<String, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    let mut current: Option<String> = None;

    for (idx, raw_line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.split('%').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = table_header(line) {
            if current.is_some() {
                return Err(CaseError::Syntax {
                    line: lineno,
                    msg: "new table opened before previous one was closed".into(),
                });
            }
            tables.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        if let Some(rest) = line.strip_prefix("mpc.baseMVA") {
            let value = rest.trim_start_matches(['=', ' ', '\t']).trim_end_matches(';').trim();
            base_mva = Some(value.parse().map_err(|_| CaseError::Syntax {
                line: lineno,
                msg: format!("bad baseMVA value {value:?}"),
            })?);
            continue;
        }
        if current.is_some() {
            if line.starts_with("];") || line == "]" {
                current = None;
                continue;
            }
            let row: Result<Vec<f64>, _> = line
                .trim_end_matches(';')
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect();
            let row = row.map_err(|_| CaseError::Syntax {
                line: lineno,
                msg: format!("non-numeric entry in row {line:?}"),
            })?;
            tables
                .get_mut(current.as_ref().unwrap())
                .unwrap()
                .push((lineno, row));
        }
        // anything else outside a table (function header, version, ...) is ignored
    }

    let base_mva = base_mva.ok_or(CaseError::MissingTable("baseMVA"))?;
    let bus_rows = tables.remove("bus").ok_or(CaseError::MissingTable("bus"))?;
    let gen_rows = tables.remove("gen").ok_or(CaseError::MissingTable("gen"))?;
    let branch_rows = tables.remove("branch").ok_or(CaseError::MissingTable("branch"))?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    for (line, row) in bus_rows {
        if row.len() < 9 {
            return Err(CaseError::Syntax { line, msg: "bus row needs at least 9 columns".into() });
        }
        buses.push(RawBus {
            number: row[0] as i64,
            bus_type: row[1] as i64,
            pd: row[2],
            qd: row[3],
            vm: row[7],
            va: row[8],
        });
    }
    let mut gens = Vec::with_capacity(gen_rows.len());
    for (line, row) in gen_rows {
        if row.len() < 8 {
            return Err(CaseError::Syntax { line, msg: "gen row needs at least 8 columns".into() });
        }
        gens.push(RawGen {
            bus: row[0] as i64,
            pg: row[1],
            qg: row[2],
            vg: row[5],
            status: row[7] != 0.0,
        });
    }
    let mut branches = Vec::with_capacity(branch_rows.len());
    for (line, row) in branch_rows {
        if row.len() < 11 {
            return Err(CaseError::Syntax { line, msg: "branch row needs at least 11 columns".into() });
        }
        branches.push(RawBranch {
            from: row[0] as i64,
            to: row[1] as i64,
            r: row[2],
            x: row[3],
            status: row[10] != 0.0,
        });
    }

    if buses.is_empty() {
        return Err(CaseError::MissingTable("bus"));
    }
    Ok(RawCase { base_mva, buses, gens, branches })
}

fn table_header(line: &str) -> Option<&'static str> {
    for (prefix, name) in [("mpc.bus", "bus"), ("mpc.gen", "gen"), ("mpc.branch", "branch")] {
        if let Some(rest) = line.strip_prefix(prefix) {
            let rest = rest.trim();
            // skip mpc.gencost etc.
            if rest.starts_with('=') && rest.trim_start_matches('=').trim().starts_with('[') {
                return Some(name);
            }
        }
    }
    None
}

/// Lowers a parsed case into a validated per-unit [`Grid`].
///
/// Bus numbers are mapped to dense 0-based ids in bus-table order.
/// Nominal injections net generation against demand: p_nom = (ΣPg − Pd)/base.
/// Voltage setpoints come from the gen table at PV/slack buses and from the
/// bus table otherwise; angles are converted from degrees to radians.
/// Out-of-service gens and branches are dropped (each noted in `warnings`).
pub fn lower_case(raw: &RawCase) -> Result<(Grid, Vec<String>), CaseError> {
    let mut warnings = Vec::new();
    let mut index: BTreeMap<i64, usize> = BTreeMap::new();
    for (i, b) in raw.buses.iter().enumerate() {
        index.insert(b.number, i);
    }

    let slack_count = raw.buses.iter().filter(|b| b.bus_type == 3).count();
    match slack_count {
        0 => return Err(CaseError::NoSlack),
        1 => {}
        _ => return Err(CaseError::MultipleSlack),
    }

    let mut pg = vec![0.0; raw.buses.len()];
    let mut qg = vec![0.0; raw.buses.len()];
    let mut vg: Vec<Option<f64>> = vec![None; raw.buses.len()];
    for g in &raw.gens {
        let &i = index.get(&g.bus).ok_or(CaseError::DanglingReference(g.bus))?;
        if !g.status {
            warnings.push(format!("dropped out-of-service generator at bus {}", g.bus));
            continue;
        }
        pg[i] += g.pg;
        qg[i] += g.qg;
        if vg[i].is_none() {
            vg[i] = Some(g.vg);
        }
    }

    let mut buses = Vec::with_capacity(raw.buses.len());
    for (i, b) in raw.buses.iter().enumerate() {
        let kind = match b.bus_type {
            1 => BusKind::Load,
            2 => BusKind::Generator,
            3 => BusKind::Slack,
            t => return Err(CaseError::UnknownBusType(t)),
        };
        let vm_nom = match kind {
            BusKind::Load => b.vm,
            // gen setpoint; falls back to the bus table if no in-service gen
            _ => vg[i].unwrap_or(b.vm),
        };
        buses.push(Bus {
            id: i,
            kind,
            p_nom: (pg[i] - b.pd) / raw.base_mva,
            q_nom: (qg[i] - b.qd) / raw.base_mva,
            vm_nom,
            va_nom: b.va.to_radians(),
        });
    }

    let mut branches = Vec::new();
    for br in &raw.branches {
        let &f = index.get(&br.from).ok_or(CaseError::DanglingReference(br.from))?;
        let &t = index.get(&br.to).ok_or(CaseError::DanglingReference(br.to))?;
        if !br.status {
            warnings.push(format!("dropped out-of-service branch {}-{}", br.from, br.to));
            continue;
        }
        branches.push(Branch { id: branches.len(), from_bus: f, to_bus: t, r: br.r, x: br.x });
    }

    let grid = Grid::new(raw.base_mva, buses, branches)?;
    Ok((grid, warnings))
}

/// Canonical grid JSON: `{base_mva, buses:[{id, kind, p, q, vm, va}],
/// branches:[{id, from, to, r, x}]}`, powers in p.u., angles in rad.
#[derive(Debug, Serialize, Deserialize)]
struct GridJson {
    base_mva: f64,
    buses: Vec<BusJson>,
    branches: Vec<BranchJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BusJson {
    id: usize,
    kind: BusKind,
    p: f64,
    q: f64,
    vm: f64,
    va: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BranchJson {
    id: usize,
    from: usize,
    to: usize,
    r: f64,
    x: f64,
}

pub fn grid_to_json(grid: &Grid) -> String {
    let doc = GridJson {
        base_mva: grid.base_mva,
        buses: grid
            .buses
            .iter()
            .map(|b| BusJson { id: b.id, kind: b.kind, p: b.p_nom, q: b.q_nom, vm: b.vm_nom, va: b.va_nom })
            .collect(),
        branches: grid
            .branches
            .iter()
            .map(|b| BranchJson { id: b.id, from: b.from_bus, to: b.to_bus, r: b.r, x: b.x })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("grid serialization cannot fail")
}

pub fn grid_from_json(text: &str) -> Result<Grid, CaseError> {
    let doc: GridJson = serde_json::from_str(text)?;
    let buses = doc
        .buses
        .into_iter()
        .map(|b| Bus { id: b.id, kind: b.kind, p_nom: b.p, q_nom: b.q, vm_nom: b.vm, va_nom: b.va })
        .collect();
    let branches = doc
        .branches
        .into_iter()
        .map(|b| Branch { id: b.id, from_bus: b.from, to_bus: b.to, r: b.r, x: b.x })
        .collect();
    Ok(Grid::new(doc.base_mva, buses, branches)?)
}

/// Loads a grid from either case text (`.m`) or canonical JSON, by sniffing
/// the content.
pub fn load_grid(path: &std::path::Path) -> Result<Grid, CaseError> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        grid_from_json(&text)
    } else {
        let raw = parse_case_text(&text)?;
        Ok(lower_case(&raw)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI_CASE: &str = r#"
function mpc = mini
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0   0  0 0 1 1.05 0 0 1 1.1 0.9;
    2 1 100 30 0 0 1 1.0  0 0 1 1.1 0.9;
];
mpc.gen = [
    1 150 10 300 -300 1.05 100 1 400 0;
];
mpc.branch = [
    1 2 0.01 0.1 0 0 0 0 0 0 1;
];
"#;

    #[test]
    fn parses_minimal_case() {
        let raw = parse_case_text(MINI_CASE).unwrap();
        assert_eq!(raw.base_mva, 100.0);
        assert_eq!((raw.buses.len(), raw.gens.len(), raw.branches.len()), (2, 1, 1));
    }

    #[test]
    fn missing_branch_table_reported() {
        let truncated: String = MINI_CASE
            .lines()
            .take_while(|l| !l.contains("mpc.branch"))
            .collect::<Vec<_>>()
            .join("\n");
        match parse_case_text(&truncated) {
            Err(CaseError::MissingTable("branch")) => {}
            other => panic!("expected MissingTable(branch), got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_carries_line_number() {
        let bad = MINI_CASE.replace("1 2 0.01 0.1", "1 2 oops 0.1");
        match parse_case_text(&bad) {
            Err(CaseError::Syntax { line, .. }) => {
                assert_eq!(bad.lines().nth(line - 1).unwrap().contains("oops"), true)
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn lowering_nets_generation_against_demand() {
        let raw = parse_case_text(MINI_CASE).unwrap();
        let (grid, warnings) = lower_case(&raw).unwrap();
        assert!(warnings.is_empty());
        // bus 0: Pg=150, Pd=0 -> +1.5; bus 1: Pd=100 -> -1.0
        assert_eq!(grid.buses[0].p_nom, 1.5);
        assert_eq!(grid.buses[1].p_nom, -1.0);
        assert_eq!(grid.buses[1].q_nom, -0.3);
        assert_eq!(grid.buses[0].vm_nom, 1.05);
        assert_eq!(grid.buses[0].kind, BusKind::Slack);
    }

    #[test]
    fn pure_load_bus_converts_per_unit() {
        let raw = RawCase {
            base_mva: 100.0,
            buses: vec![
                RawBus { number: 1, bus_type: 3, pd: 0.0, qd: 0.0, vm: 1.0, va: 0.0 },
                RawBus { number: 2, bus_type: 1, pd: 100.0, qd: 0.0, vm: 1.0, va: 0.0 },
            ],
            gens: vec![RawGen { bus: 1, pg: 0.0, qg: 0.0, vg: 1.0, status: true }],
            branches: vec![RawBranch { from: 1, to: 2, r: 0.01, x: 0.1, status: true }],
        };
        let (grid, _) = lower_case(&raw).unwrap();
        assert_eq!(grid.buses[1].p_nom, -1.0);
    }

    #[test]
    fn json_round_trip_is_identical() {
        let raw = parse_case_text(MINI_CASE).unwrap();
        let (grid, _) = lower_case(&raw).unwrap();
        let reloaded = grid_from_json(&grid_to_json(&grid)).unwrap();
        assert_eq!(grid, reloaded);
    }

    #[test]
    fn out_of_service_branch_dropped_with_warning() {
        let modified = MINI_CASE.replace(
            "mpc.branch = [\n    1 2 0.01 0.1 0 0 0 0 0 0 1;",
            "mpc.branch = [\n    1 2 0.01 0.1 0 0 0 0 0 0 1;\n    1 2 0.02 0.2 0 0 0 0 0 0 0;",
        );
        let raw = parse_case_text(&modified).unwrap();
        let (grid, warnings) = lower_case(&raw).unwrap();
        assert_eq!(grid.branches.len(), 1);
        assert_eq!(warnings.len(), 1);
    }
}
