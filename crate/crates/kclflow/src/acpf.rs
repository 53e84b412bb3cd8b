//! Newton-Raphson AC power-flow oracle.
//!
//! Solves the polar power-balance equations for a [`Grid`] and derives
//! per-branch flows and per-bus net injections. This is the ground-truth
//! generator for every dataset: the surrogate is trained to reproduce the
//! branch flows this solver computes.

use crate::grid::{BusKind, Endpoint, Grid, GridError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("did not converge in {iterations} iterations, last mismatch {max_mismatch:.3e}")]
    Diverged { iterations: usize, max_mismatch: f64 },
    #[error("singular Jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("flow vector has length {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
}

/// Bus admittance matrix Y = G + jB, dense (N ≤ a few hundred here).
#[derive(Debug, Clone)]
pub struct Admittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Series-only admittance assembly: y = 1/(r + jx) per branch, accumulated
/// with Y_ii = −Σ_{j≠i} Y_ij (no shunts in the line model).
pub fn build_ybus(grid: &Grid) -> Result<Admittance, SolveError> {
    let n = grid.buses.len();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for br in &grid.branches {
        let d = br.r * br.r + br.x * br.x;
        if d <= 0.0 {
            return Err(GridError::ZeroImpedance(br.id).into());
        }
        let (gy, by) = (br.r / d, -br.x / d);
        let (i, j) = (br.from_bus, br.to_bus);
        g[(i, j)] -= gy;
        g[(j, i)] -= gy;
        b[(i, j)] -= by;
        b[(j, i)] -= by;
        g[(i, i)] += gy;
        g[(j, j)] += gy;
        b[(i, i)] += by;
        b[(j, j)] += by;
    }
    Ok(Admittance { g, b })
}

/// Specified quantities per bus: P,Q at loads; P,Vm at generators;
/// Vm,Va at the slack. Unused slots are ignored by the solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PfInputs {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub vm: Vec<f64>,
}

impl PfInputs {
    pub fn nominal(grid: &Grid) -> Self {
        PfInputs {
            p: grid.buses.iter().map(|b| b.p_nom).collect(),
            q: grid.buses.iter().map(|b| b.q_nom).collect(),
            vm: grid.buses.iter().map(|b| b.vm_nom).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PFSolution {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    /// Net active injection per bus (generation positive), p.u.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Flat flow vector of length 4|E|, ordered
/// (all p_from, all p_to, all q_from, all q_to).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSet(pub Vec<f64>);

impl FlowSet {
    pub fn zeros(n_branch: usize) -> Self {
        FlowSet(vec![0.0; 4 * n_branch])
    }

    pub fn n_branch(&self) -> usize {
        self.0.len() / 4
    }

    pub fn p_from(&self, e: usize) -> f64 {
        self.0[e]
    }
    pub fn p_to(&self, e: usize) -> f64 {
        self.0[self.n_branch() + e]
    }
    pub fn q_from(&self, e: usize) -> f64 {
        self.0[2 * self.n_branch() + e]
    }
    pub fn q_to(&self, e: usize) -> f64 {
        self.0[3 * self.n_branch() + e]
    }

    /// Slot of a flow component in the flat layout.
    pub fn slot(n_branch: usize, e: usize, endpoint: Endpoint, reactive: bool) -> usize {
        let block = match (reactive, endpoint) {
            (false, Endpoint::From) => 0,
            (false, Endpoint::To) => 1,
            (true, Endpoint::From) => 2,
            (true, Endpoint::To) => 3,
        };
        block * n_branch + e
    }
}

/// Calculated injections P_i = V_i Σ_j V_j (G_ij cosθ_ij + B_ij sinθ_ij)
/// and the Q analogue for a voltage profile.
pub fn calc_injections(y: &Admittance, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = vm.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let mut pi = 0.0;
        let mut qi = 0.0;
        for j in 0..n {
            let (gij, bij) = (y.g[(i, j)], y.b[(i, j)]);
            if gij == 0.0 && bij == 0.0 {
                continue;
            }
            let th = va[i] - va[j];
            let (s, c) = th.sin_cos();
            pi += vm[j] * (gij * c + bij * s);
            qi += vm[j] * (gij * s - bij * c);
        }
        p[i] = vm[i] * pi;
        q[i] = vm[i] * qi;
    }
    (p, q)
}

/// Full Newton-Raphson solve from a flat start (Vm = 1, Va = 0 at unknowns;
/// slack angle fixed at its nominal). Converges when the infinity norm of
/// the mismatch (specified − calculated) drops to `tol`.
pub fn nr_solve(
    grid: &Grid,
    inputs: &PfInputs,
    tol: f64,
    max_iter: usize,
) -> Result<PFSolution, SolveError> {
    let n = grid.buses.len();
    let y = build_ybus(grid)?;
    let slack = grid.slack_bus();

    // unknown ordering: angles at all non-slack buses, then magnitudes at loads
    let ang_buses: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let mag_buses: Vec<usize> =
        (0..n).filter(|&i| grid.buses[i].kind == BusKind::Load).collect();

    let mut vm: Vec<f64> = (0..n)
        .map(|i| match grid.buses[i].kind {
            BusKind::Load => 1.0,
            _ => inputs.vm[i],
        })
        .collect();
    let mut va: Vec<f64> = (0..n)
        .map(|i| if i == slack { grid.buses[i].va_nom } else { 0.0 })
        .collect();

    let m = ang_buses.len() + mag_buses.len();
    let mut iterations = 0;
    let mut max_mismatch;

    loop {
        let (p_calc, q_calc) = calc_injections(&y, &vm, &va);
        let mut f = DVector::zeros(m);
        for (k, &i) in ang_buses.iter().enumerate() {
            f[k] = inputs.p[i] - p_calc[i];
        }
        for (k, &i) in mag_buses.iter().enumerate() {
            f[ang_buses.len() + k] = inputs.q[i] - q_calc[i];
        }
        max_mismatch = f.amax();
        if max_mismatch <= tol {
            let (p_inj, q_inj) = (p_calc, q_calc);
            return Ok(PFSolution { vm, va, p_inj, q_inj, iterations, max_mismatch });
        }
        if iterations >= max_iter {
            return Err(SolveError::Diverged { iterations, max_mismatch });
        }

        let jac = jacobian(&y, &vm, &va, &p_calc, &q_calc, &ang_buses, &mag_buses);
        let lu = jac.lu();
        let dx = lu.solve(&f).ok_or(SolveError::SingularJacobian(iterations))?;
        for (k, &i) in ang_buses.iter().enumerate() {
            va[i] += dx[k];
        }
        for (k, &i) in mag_buses.iter().enumerate() {
            vm[i] += dx[ang_buses.len() + k];
        }
        iterations += 1;
    }
}

/// Polar power-flow Jacobian of the calculated injections with respect to
/// (Va at `ang_buses`, Vm at `mag_buses`).
pub fn jacobian(
    y: &Admittance,
    vm: &[f64],
    va: &[f64],
    p_calc: &[f64],
    q_calc: &[f64],
    ang_buses: &[usize],
    mag_buses: &[usize],
) -> DMatrix<f64> {
    let na = ang_buses.len();
    let m = na + mag_buses.len();
    let mut jac = DMatrix::zeros(m, m);

    let dp_dth = |i: usize, j: usize| -> f64 {
        if i == j {
            -q_calc[i] - y.b[(i, i)] * vm[i] * vm[i]
        } else {
            let th = va[i] - va[j];
            vm[i] * vm[j] * (y.g[(i, j)] * th.sin() - y.b[(i, j)] * th.cos())
        }
    };
    let dp_dv = |i: usize, j: usize| -> f64 {
        if i == j {
            p_calc[i] / vm[i] + y.g[(i, i)] * vm[i]
        } else {
            let th = va[i] - va[j];
            vm[i] * (y.g[(i, j)] * th.cos() + y.b[(i, j)] * th.sin())
        }
    };
    let dq_dth = |i: usize, j: usize| -> f64 {
        if i == j {
            p_calc[i] - y.g[(i, i)] * vm[i] * vm[i]
        } else {
            let th = va[i] - va[j];
            -vm[i] * vm[j] * (y.g[(i, j)] * th.cos() + y.b[(i, j)] * th.sin())
        }
    };
    let dq_dv = |i: usize, j: usize| -> f64 {
        if i == j {
            q_calc[i] / vm[i] - y.b[(i, i)] * vm[i]
        } else {
            let th = va[i] - va[j];
            vm[i] * (y.g[(i, j)] * th.sin() - y.b[(i, j)] * th.cos())
        }
    };

    // mismatch is specified − calculated, so J = ∂calc/∂x enters the update
    // as x ← x + J⁻¹ f
    for (r, &i) in ang_buses.iter().enumerate() {
        for (c, &j) in ang_buses.iter().enumerate() {
            jac[(r, c)] = dp_dth(i, j);
        }
        for (c, &j) in mag_buses.iter().enumerate() {
            jac[(r, na + c)] = dp_dv(i, j);
        }
    }
    for (r, &i) in mag_buses.iter().enumerate() {
        for (c, &j) in ang_buses.iter().enumerate() {
            jac[(na + r, c)] = dq_dth(i, j);
        }
        for (c, &j) in mag_buses.iter().enumerate() {
            jac[(na + r, na + c)] = dq_dv(i, j);
        }
    }
    jac
}

/// Per-branch from/to flows from a solved voltage profile. Flow out of a
/// bus into the line is positive.
pub fn branch_flows(grid: &Grid, sol: &PFSolution) -> FlowSet {
    let ne = grid.branches.len();
    let mut flows = FlowSet::zeros(ne);
    for br in &grid.branches {
        let d = br.r * br.r + br.x * br.x;
        let (g, b) = (br.r / d, -br.x / d);
        let (i, j) = (br.from_bus, br.to_bus);
        let (vi, vj) = (sol.vm[i], sol.vm[j]);
        let th = sol.va[i] - sol.va[j];
        let (s, c) = th.sin_cos();
        flows.0[FlowSet::slot(ne, br.id, Endpoint::From, false)] =
            g * vi * vi - vi * vj * (g * c + b * s);
        flows.0[FlowSet::slot(ne, br.id, Endpoint::From, true)] =
            -b * vi * vi - vi * vj * (g * s - b * c);
        flows.0[FlowSet::slot(ne, br.id, Endpoint::To, false)] =
            g * vj * vj - vj * vi * (g * c - b * s);
        flows.0[FlowSet::slot(ne, br.id, Endpoint::To, true)] =
            -b * vj * vj - vj * vi * (-g * s - b * c);
    }
    flows
}

/// Sums incident branch flows into per-bus calculated injections
/// (P_calc, Q_calc).
pub fn net_injections_from_flows(grid: &Grid, flows: &FlowSet) -> Result<(Vec<f64>, Vec<f64>), SolveError> {
    let ne = grid.branches.len();
    if flows.0.len() != 4 * ne {
        return Err(SolveError::DimMismatch { got: flows.0.len(), expected: 4 * ne });
    }
    let n = grid.buses.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for br in &grid.branches {
        p[br.from_bus] += flows.p_from(br.id);
        q[br.from_bus] += flows.q_from(br.id);
        p[br.to_bus] += flows.p_to(br.id);
        q[br.to_bus] += flows.q_to(br.id);
    }
    Ok((p, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Bus, Grid};
    use approx::assert_abs_diff_eq;

    fn two_bus() -> Grid {
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
    fn ybus_pure_reactance() {
        let mut g = two_bus();
        g.branches[0].r = 0.0;
        let y = build_ybus(&g).unwrap();
        assert_abs_diff_eq!(y.g[(0, 1)], 0.0);
        assert_abs_diff_eq!(y.b[(0, 1)], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.b[(0, 0)], -10.0, epsilon = 1e-12);
    }

    #[test]
    fn ybus_series_formula() {
        let g = two_bus();
        let y = build_ybus(&g).unwrap();
        // y = 1/(0.01 + j0.1): g = 0.990099, b = -9.90099
        assert_abs_diff_eq!(y.g[(0, 0)], 0.990099, epsilon = 1e-6);
        assert_abs_diff_eq!(y.b[(0, 0)], -9.90099, epsilon = 1e-5);
    }

    #[test]
    fn ybus_parallel_lines_add() {
        let mut g = two_bus();
        let mut dup = g.branches[0].clone();
        dup.id = 1;
        g.branches.push(dup);
        let single = build_ybus(&two_bus()).unwrap();
        let double = build_ybus(&g).unwrap();
        assert_abs_diff_eq!(double.b[(0, 1)], 2.0 * single.b[(0, 1)], epsilon = 1e-12);
    }

    #[test]
    fn no_load_flat_solution() {
        let mut g = two_bus();
        g.buses[1].p_nom = 0.0;
        g.buses[1].q_nom = 0.0;
        let sol = nr_solve(&g, &PfInputs::nominal(&g), 1e-8, 20).unwrap();
        assert!(sol.iterations <= 1);
        assert_abs_diff_eq!(sol.vm[1], 1.0, epsilon = 1e-9);
        let flows = branch_flows(&g, &sol);
        assert!(flows.0.iter().all(|f| f.abs() < 1e-9));
    }

    #[test]
    fn two_bus_solution_satisfies_injections() {
        let g = two_bus();
        let sol = nr_solve(&g, &PfInputs::nominal(&g), 1e-10, 20).unwrap();
        assert!(sol.max_mismatch <= 1e-10);
        assert_abs_diff_eq!(sol.p_inj[1], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.q_inj[1], -0.2, epsilon = 1e-9);
        // flow summation matches injections at both buses
        let flows = branch_flows(&g, &sol);
        let (p, q) = net_injections_from_flows(&g, &flows).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(p[i], sol.p_inj[i], epsilon = 1e-9);
            assert_abs_diff_eq!(q[i], sol.q_inj[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn lossless_line_flow_antisymmetric() {
        // r = 0: p_from + p_to = 0 exactly for random voltage profiles
        let mut g = two_bus();
        g.branches[0].r = 0.0;
        let sol = PFSolution {
            vm: vec![1.03, 0.97],
            va: vec![0.1, -0.23],
            p_inj: vec![0.0; 2],
            q_inj: vec![0.0; 2],
            iterations: 0,
            max_mismatch: 0.0,
        };
        let flows = branch_flows(&g, &sol);
        assert_abs_diff_eq!(flows.p_from(0) + flows.p_to(0), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn equal_voltage_no_transfer() {
        let g = two_bus();
        let sol = PFSolution {
            vm: vec![1.0, 1.0],
            va: vec![0.0, 0.0],
            p_inj: vec![0.0; 2],
            q_inj: vec![0.0; 2],
            iterations: 0,
            max_mismatch: 0.0,
        };
        let flows = branch_flows(&g, &sol);
        assert_abs_diff_eq!(flows.p_from(0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(flows.p_to(0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(flows.q_from(0), flows.q_to(0), epsilon = 1e-14);
    }

    #[test]
    fn single_branch_injection_sum() {
        let g = two_bus();
        let mut flows = FlowSet::zeros(1);
        flows.0[0] = 1.0; // p_from
        flows.0[1] = -0.97; // p_to
        let (p, _) = net_injections_from_flows(&g, &flows).unwrap();
        assert_eq!(p, vec![1.0, -0.97]);
    }

    #[test]
    fn divergence_reported() {
        let mut g = two_bus();
        g.buses[1].p_nom = -50.0; // far beyond transferable power
        match nr_solve(&g, &PfInputs::nominal(&g), 1e-8, 20) {
            Err(SolveError::Diverged { .. }) | Err(SolveError::SingularJacobian(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
