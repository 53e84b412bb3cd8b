//! Power-flow surrogate toolkit: Newton-Raphson ground truth, a graph
//! surrogate predicting per-line flows, and hard Kirchhoff-current-law
//! enforcement through an affine pseudoinverse projection layer.

pub mod acpf;
pub mod case;
pub mod grid;
pub mod net;
pub mod projection;
pub mod scenario;
pub mod train;
