//! Core grid data model: buses, branches, and topology queries.
//!
//! All electrical quantities are in per-unit on the grid's MVA base.
//! Bus and branch ids are dense 0-based indices assigned at ingest;
//! original case-file bus numbers are kept only as metadata by the parser.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid has no slack bus")]
    NoSlack,
    #[error("grid has {0} slack buses, expected exactly one")]
    MultipleSlack(usize),
    #[error("branch {branch} references unknown bus {bus}")]
    DanglingReference { branch: usize, bus: usize },
    #[error("branch {0} is a self-loop")]
    SelfLoop(usize),
    #[error("branch {0} has non-positive impedance magnitude")]
    ZeroImpedance(usize),
    #[error("branch {0} has negative resistance")]
    NegativeResistance(usize),
    #[error("bus {0} has non-positive or non-finite voltage magnitude")]
    BadVoltage(usize),
    #[error("bus {0} has a non-finite field")]
    NonFinite(usize),
    #[error("grid is not connected")]
    Disconnected,
    #[error("bus or branch ids are not dense 0-based indices")]
    NonDenseIds,
    #[error("unknown branch id {0}")]
    UnknownBranch(usize),
    #[error("branch {0} is adjacent to the slack bus and may not be removed")]
    SlackAdjacent(usize),
    #[error("removing branch {0} would island the grid")]
    WouldIsland(usize),
}

/// Bus category: exactly one slack per grid, PV generators, PQ loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Nominal net active injection, p.u. (generation positive).
    pub p_nom: f64,
    /// Nominal net reactive injection, p.u.
    pub q_nom: f64,
    /// Nominal voltage magnitude, p.u.
    pub vm_nom: f64,
    /// Nominal voltage angle, rad.
    pub va_nom: f64,
}

/// Directed branch record; the electrical graph is treated as undirected
/// for connectivity, but flow targets are per-endpoint (from/to).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
}

/// Which end of a branch a bus sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    From,
    To,
}

impl Grid {
    /// Validates all invariants and returns the grid.
    pub fn new(base_mva: f64, buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self, GridError> {
        let grid = Grid { base_mva, buses, branches };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let n = self.buses.len();
        if self.buses.iter().enumerate().any(|(i, b)| b.id != i)
            || self.branches.iter().enumerate().any(|(i, b)| b.id != i)
        {
            return Err(GridError::NonDenseIds);
        }
        let mut slack_count = 0usize;
        for b in &self.buses {
            if !(b.p_nom.is_finite() && b.q_nom.is_finite() && b.va_nom.is_finite()) {
                return Err(GridError::NonFinite(b.id));
            }
            if !(b.vm_nom.is_finite() && b.vm_nom > 0.0) {
                return Err(GridError::BadVoltage(b.id));
            }
            if b.kind == BusKind::Slack {
                slack_count += 1;
            }
        }
        match slack_count {
            0 => return Err(GridError::NoSlack),
            1 => {}
            k => return Err(GridError::MultipleSlack(k)),
        }
        for br in &self.branches {
            if br.from_bus >= n {
                return Err(GridError::DanglingReference { branch: br.id, bus: br.from_bus });
            }
            if br.to_bus >= n {
                return Err(GridError::DanglingReference { branch: br.id, bus: br.to_bus });
            }
            if br.from_bus == br.to_bus {
                return Err(GridError::SelfLoop(br.id));
            }
            if br.r < 0.0 {
                return Err(GridError::NegativeResistance(br.id));
            }
            if br.r * br.r + br.x * br.x <= 0.0 {
                return Err(GridError::ZeroImpedance(br.id));
            }
        }
        if !self.check_connected(None) {
            return Err(GridError::Disconnected);
        }
        Ok(())
    }

    pub fn slack_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated grid has a slack bus")
    }

    /// Per-bus lists of (branch id, endpoint role). Every branch appears
    /// once in its from-bus list and once in its to-bus list.
    pub fn adjacency(&self) -> Vec<Vec<(usize, Endpoint)>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for br in &self.branches {
            adj[br.from_bus].push((br.id, Endpoint::From));
            adj[br.to_bus].push((br.id, Endpoint::To));
        }
        adj
    }

    pub fn degree(&self, bus: usize) -> usize {
        self.branches
            .iter()
            .filter(|b| b.from_bus == bus || b.to_bus == bus)
            .count()
    }

    /// True iff the undirected graph, excluding `removed_branch`, is connected.
    pub fn check_connected(&self, removed_branch: Option<usize>) -> bool {
        let n = self.buses.len();
        if n == 0 {
            return false;
        }
        // union-find over bus ids
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for br in &self.branches {
            if Some(br.id) == removed_branch {
                continue;
            }
            let (a, b) = (find(&mut parent, br.from_bus), find(&mut parent, br.to_bus));
            if a != b {
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        (1..n).all(|i| find(&mut parent, i) == root)
    }

    /// Removes a branch for N-1 analysis. Rejects removals touching the
    /// slack bus and removals that would island the grid. Remaining branch
    /// ids are reassigned densely, preserving order; buses are untouched.
    pub fn remove_branch(&self, branch: usize) -> Result<Grid, GridError> {
        let br = self.branches.get(branch).ok_or(GridError::UnknownBranch(branch))?;
        let slack = self.slack_bus();
        if br.from_bus == slack || br.to_bus == slack {
            return Err(GridError::SlackAdjacent(branch));
        }
        if !self.check_connected(Some(branch)) {
            return Err(GridError::WouldIsland(branch));
        }
        let branches = self
            .branches
            .iter()
            .filter(|b| b.id != branch)
            .enumerate()
            .map(|(i, b)| Branch { id: i, ..b.clone() })
            .collect();
        Ok(Grid {
            base_mva: self.base_mva,
            buses: self.buses.clone(),
            branches,
        })
    }

    /// Content hash of the topology and electrical parameters. Keys the
    /// per-topology constraint cache, so N-1 variants hash differently.
    pub fn topology_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.buses.len() as u64).to_le_bytes());
        h.update((self.branches.len() as u64).to_le_bytes());
        for b in &self.buses {
            let kind = match b.kind {
                BusKind::Slack => 0u8,
                BusKind::Generator => 1,
                BusKind::Load => 2,
            };
            h.update([kind]);
        }
        for br in &self.branches {
            h.update((br.from_bus as u64).to_le_bytes());
            h.update((br.to_bus as u64).to_le_bytes());
            h.update(br.r.to_bits().to_le_bytes());
            h.update(br.x.to_bits().to_le_bytes());
        }
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_bus() -> Grid {
        Grid::new(
            100.0,
            vec![
                Bus { id: 0, kind: BusKind::Slack, p_nom: 0.0, q_nom: 0.0, vm_nom: 1.0, va_nom: 0.0 },
                Bus { id: 1, kind: BusKind::Load, p_nom: -1.0, q_nom: -0.2, vm_nom: 1.0, va_nom: 0.0 },
            ],
            vec![Branch { id: 0, from_bus: 0, to_bus: 1, r: 0.01, x: 0.1 }],
        )
        .unwrap()
    }

    #[test]
    fn adjacency_single_edge() {
        let g = two_bus();
        let adj = g.adjacency();
        assert_eq!(adj[0], vec![(0, Endpoint::From)]);
        assert_eq!(adj[1], vec![(0, Endpoint::To)]);
    }

    #[test]
    fn removing_only_line_disconnects() {
        let g = two_bus();
        assert!(g.check_connected(None));
        assert!(!g.check_connected(Some(0)));
    }

    #[test]
    fn remove_branch_rejects_islanding_and_slack_adjacent() {
        let g = two_bus();
        // the single line is both slack-adjacent and a bridge; slack check fires first
        assert_eq!(g.remove_branch(0), Err(GridError::SlackAdjacent(0)));
    }

    #[test]
    fn duplicate_slack_rejected() {
        let mut g = two_bus();
        g.buses[1].kind = BusKind::Slack;
        assert_eq!(g.validate(), Err(GridError::MultipleSlack(2)));
    }

    #[test]
    fn topology_hash_changes_with_branch_set() {
        let g = two_bus();
        let mut g2 = g.clone();
        g2.branches[0].x = 0.2;
        assert_ne!(g.topology_hash(), g2.topology_hash());
        assert_eq!(g.topology_hash(), two_bus().topology_hash());
    }
}
