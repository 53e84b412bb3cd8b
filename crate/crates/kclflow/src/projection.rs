//! KCL equality system and flow projections.
//!
//! For a fixed topology the per-bus conservation constraints stack into an
//! affine system A y + b = 0 over the 4|E| flow vector, where row i (resp.
//! N+i) is the 0/1 normal vector selecting the flow slots incident to bus i
//! for active (resp. reactive) power and b holds the net injections.
//!
//! Two projectors onto the solution space are provided: the global
//! Moore-Penrose step ỹ = y − A†(Ay + b), which is the Euclidean-closest
//! feasible point, and sequential per-bus hyperplane sweeps (Kaczmarz).
//! A and A† depend only on topology and are cached per topology hash;
//! b changes per scenario.

use crate::acpf::FlowSet;
use crate::grid::{Endpoint, Grid};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("bus {0} has no incident branch")]
    IsolatedBus(usize),
    #[error("vector has length {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("pseudoinverse computation failed: {0}")]
    SvdFailed(String),
}

/// Topology-only part of the constraint system: A, its pseudoinverse, and
/// the per-bus slot lists that realize the 0/1 normal vectors.
#[derive(Debug, Clone)]
pub struct KclMatrix {
    pub a: DMatrix<f64>,
    pub a_pinv: DMatrix<f64>,
    pub topology_hash: String,
    pub n_bus: usize,
    pub n_branch: usize,
    /// For each bus, the p-slot indices of incident branches (from-slots for
    /// out-edges, to-slots for in-edges). Q-slots are these shifted by 2|E|.
    p_slots: Vec<Vec<usize>>,
}

impl KclMatrix {
    pub fn build(grid: &Grid) -> Result<Self, ProjectionError> {
        let n = grid.buses.len();
        let ne = grid.branches.len();
        let mut p_slots = vec![Vec::new(); n];
        for br in &grid.branches {
            p_slots[br.from_bus].push(FlowSet::slot(ne, br.id, Endpoint::From, false));
            p_slots[br.to_bus].push(FlowSet::slot(ne, br.id, Endpoint::To, false));
        }
        if let Some(i) = p_slots.iter().position(|s| s.is_empty()) {
            return Err(ProjectionError::IsolatedBus(i));
        }

        let mut a = DMatrix::zeros(2 * n, 4 * ne);
        for (i, slots) in p_slots.iter().enumerate() {
            for &s in slots {
                a[(i, s)] = 1.0; // P row
                a[(n + i, 2 * ne + s)] = 1.0; // Q row, shifted into q slots
            }
        }

        let svd = a.clone().svd(true, true);
        let sigma_max = svd.singular_values.max();
        let a_pinv = svd
            .pseudo_inverse(1e-10 * sigma_max)
            .map_err(|e| ProjectionError::SvdFailed(e.to_string()))?;

        Ok(KclMatrix {
            a,
            a_pinv,
            topology_hash: grid.topology_hash(),
            n_bus: n,
            n_branch: ne,
            p_slots,
        })
    }

    pub fn dim(&self) -> usize {
        4 * self.n_branch
    }
}

/// One topology's KCL system bound to one scenario's net injections.
/// `b = (P_net(0..N), Q_net(0..N))` where P_net(i) is minus the bus's net
/// injection, so A y + b = 0 holds for the solved branch flows.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub matrix: Arc<KclMatrix>,
    pub b: DVector<f64>,
}

impl ConstraintSystem {
    pub fn new(matrix: Arc<KclMatrix>, net_p: &[f64], net_q: &[f64]) -> Result<Self, ProjectionError> {
        let n = matrix.n_bus;
        if net_p.len() != n || net_q.len() != n {
            return Err(ProjectionError::DimMismatch {
                got: net_p.len().max(net_q.len()),
                expected: n,
            });
        }
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            b[i] = net_p[i];
            b[n + i] = net_q[i];
        }
        Ok(ConstraintSystem { matrix, b })
    }

    fn check_dim(&self, y: &[f64]) -> Result<(), ProjectionError> {
        if y.len() != self.matrix.dim() {
            return Err(ProjectionError::DimMismatch { got: y.len(), expected: self.matrix.dim() });
        }
        Ok(())
    }
}

/// Assembles the full system for a grid and one scenario's net injections.
pub fn build_system(grid: &Grid, net_p: &[f64], net_q: &[f64]) -> Result<ConstraintSystem, ProjectionError> {
    let matrix = Arc::new(KclMatrix::build(grid)?);
    ConstraintSystem::new(matrix, net_p, net_q)
}

/// r = A y + b.
pub fn kcl_residual(sys: &ConstraintSystem, y: &FlowSet) -> Result<DVector<f64>, ProjectionError> {
    sys.check_dim(&y.0)?;
    let yv = DVector::from_column_slice(&y.0);
    Ok(&sys.matrix.a * yv + &sys.b)
}

/// Global Moore-Penrose projection ỹ = y − A†(A y + b): the
/// Euclidean-closest point satisfying every KCL constraint.
pub fn project_global(sys: &ConstraintSystem, y: &FlowSet) -> Result<FlowSet, ProjectionError> {
    let r = kcl_residual(sys, y)?;
    let correction = &sys.matrix.a_pinv * r;
    let out = y.0.iter().zip(correction.iter()).map(|(yi, ci)| yi - ci).collect();
    Ok(FlowSet(out))
}

/// Reverse-mode gradients of `project_global` with respect to its inputs:
/// grad_y = (I − A†A)·upstream (the projector is symmetric),
/// grad_b = −A†ᵀ·upstream.
pub fn project_global_backward(
    sys: &ConstraintSystem,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), ProjectionError> {
    sys.check_dim(upstream)?;
    let u = DVector::from_column_slice(upstream);
    let au = &sys.matrix.a * &u;
    let grad_y = &u - &sys.matrix.a_pinv * au;
    let grad_b = -(sys.matrix.a_pinv.transpose() * u);
    Ok((grad_y.as_slice().to_vec(), grad_b.as_slice().to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerKind {
    Active,
    Reactive,
}

/// Single hyperplane projection Π_i^P or Π_i^Q: moves y along the bus's
/// normal vector so that its one constraint holds exactly.
pub fn project_bus(
    sys: &ConstraintSystem,
    y: &FlowSet,
    bus: usize,
    which: PowerKind,
) -> Result<FlowSet, ProjectionError> {
    sys.check_dim(&y.0)?;
    let mut out = y.clone();
    project_bus_in_place(sys, &mut out, bus, which);
    Ok(out)
}

fn project_bus_in_place(sys: &ConstraintSystem, y: &mut FlowSet, bus: usize, which: PowerKind) {
    let m = &sys.matrix;
    let (shift, b_row) = match which {
        PowerKind::Active => (0, bus),
        PowerKind::Reactive => (2 * m.n_branch, m.n_bus + bus),
    };
    let slots = &m.p_slots[bus];
    let dot: f64 = slots.iter().map(|&s| y.0[s + shift]).sum();
    let alpha = (dot + sys.b[b_row]) / slots.len() as f64;
    for &s in slots {
        y.0[s + shift] -= alpha;
    }
}

/// Constraint sweep order for Kaczmarz iteration.
#[derive(Debug, Clone)]
pub enum Ordering {
    /// Bus index ascending, P before Q per bus.
    Fixed,
    /// A fresh random bus permutation each sweep.
    Randomized { seed: u64 },
}

/// Sequential per-bus hyperplane sweeps. Each sweep applies Π_i^P then
/// Π_i^Q for every bus in the chosen order, stopping early once
/// ‖A y + b‖∞ ≤ tol. Non-convergence is reported through `sweeps_used`
/// equal to `sweeps` and the caller checking the residual.
pub fn project_kaczmarz(
    sys: &ConstraintSystem,
    y: &FlowSet,
    ordering: &Ordering,
    sweeps: usize,
    tol: f64,
) -> Result<(FlowSet, usize), ProjectionError> {
    sys.check_dim(&y.0)?;
    let mut cur = y.clone();
    let mut order: Vec<usize> = (0..sys.matrix.n_bus).collect();
    let mut rng = match ordering {
        Ordering::Fixed => None,
        Ordering::Randomized { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
    };
    for sweep in 0..sweeps {
        if kcl_residual(sys, &cur)?.amax() <= tol {
            return Ok((cur, sweep));
        }
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        for &bus in &order {
            project_bus_in_place(sys, &mut cur, bus, PowerKind::Active);
            project_bus_in_place(sys, &mut cur, bus, PowerKind::Reactive);
        }
    }
    Ok((cur, sweeps))
}

/// Process-wide cache of per-topology constraint matrices, keyed by
/// topology hash. Get-or-build is atomic under a mutex so parallel
/// evaluators share one assembly.
#[derive(Debug, Default)]
pub struct SystemCache {
    inner: Mutex<HashMap<String, Arc<KclMatrix>>>,
}

impl SystemCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, grid: &Grid) -> Result<Arc<KclMatrix>, ProjectionError> {
        let key = grid.topology_hash();
        let mut map = self.inner.lock().unwrap();
        if let Some(m) = map.get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(KclMatrix::build(grid)?);
        map.insert(key, m.clone());
        Ok(m)
    }

    pub fn system(&self, grid: &Grid, net_p: &[f64], net_q: &[f64]) -> Result<ConstraintSystem, ProjectionError> {
        ConstraintSystem::new(self.get_or_build(grid)?, net_p, net_q)
    }
}
