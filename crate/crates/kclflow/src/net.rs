//! Graph surrogate forward pass and exact reverse-mode gradients.
//!
//! One message-passing layer (edge MLP over [x_i, x_j, e_ij], summed over
//! the undirected neighborhood), one multi-head attention refinement, a
//! learnable skip from the raw node features, and an edge decoder that
//! emits (p_from, p_to, q_from, q_to) per branch. The terminal projection
//! layer makes every output KCL-feasible regardless of the parameters;
//! omitting it is the ablation configuration.
//!
//! Gradients are computed by hand against a forward tape rather than a
//! general autodiff engine: the architecture is small and fixed, and the
//! finite-difference suite in the tests pins every stage.

use crate::acpf::FlowSet;
use crate::grid::Grid;
use crate::projection::{project_global, project_global_backward, ConstraintSystem};
use crate::scenario::Normalization;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tape does not match the given inputs")]
    StaleTape,
    #[error(transparent)]
    Projection(#[from] crate::projection::ProjectionError),
}

/// Architecture hyperparameters. Widths and head counts are configuration,
/// recorded in every checkpoint, not claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: usize,
    pub heads: usize,
    pub attn_dim: usize,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { hidden: 64, heads: 4, attn_dim: 16, leaky_slope: 0.01 }
    }
}

const NODE_FEATS: usize = 3;
const EDGE_FEATS: usize = 2;

/// All learnable tensors. Message MLP (w1/b1/w2/b2), per-head attention
/// transform and scoring vector, skip projection, and the two edge-decoder
/// layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w_att: Vec<DMatrix<f64>>,
    pub a_att: Vec<DVector<f64>>,
    pub w_skip: DMatrix<f64>,
    pub we1: DMatrix<f64>,
    pub be1: DVector<f64>,
    pub we2: DMatrix<f64>,
    pub be2: DVector<f64>,
}

impl SurrogateParams {
    /// Xavier-normal weights (std² = 2/(fan_in+fan_out)), zero biases.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let h = cfg.hidden;
        let ha = cfg.attn_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            DMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
        }
        let w1 = xavier(&mut rng, h, 2 * NODE_FEATS + EDGE_FEATS);
        let w2 = xavier(&mut rng, h, h);
        let w_att: Vec<_> =
            (0..cfg.heads).map(|_| xavier(&mut rng, ha, 2 * h + EDGE_FEATS)).collect();
        let a_att: Vec<_> = (0..cfg.heads)
            .map(|_| DVector::from_column_slice(xavier(&mut rng, ha, 1).as_slice()))
            .collect();
        let w_skip = xavier(&mut rng, h, NODE_FEATS);
        let we1 = xavier(&mut rng, h, 2 * h + EDGE_FEATS);
        let we2 = xavier(&mut rng, 4, h);
        SurrogateParams {
            b1: DVector::zeros(h),
            b2: DVector::zeros(h),
            be1: DVector::zeros(h),
            be2: DVector::zeros(4),
            w1,
            w2,
            w_att,
            a_att,
            w_skip,
            we1,
            we2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|m| m.fill(0.0));
        z
    }

    fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(&'a [f64])) {
        f(self.w1.as_slice());
        f(self.b1.as_slice());
        f(self.w2.as_slice());
        f(self.b2.as_slice());
        for w in &self.w_att {
            f(w.as_slice());
        }
        for a in &self.a_att {
            f(a.as_slice());
        }
        f(self.w_skip.as_slice());
        f(self.we1.as_slice());
        f(self.be1.as_slice());
        f(self.we2.as_slice());
        f(self.be2.as_slice());
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.w1.as_mut_slice());
        f(self.b1.as_mut_slice());
        f(self.w2.as_mut_slice());
        f(self.b2.as_mut_slice());
        for w in &mut self.w_att {
            f(w.as_mut_slice());
        }
        for a in &mut self.a_att {
            f(a.as_mut_slice());
        }
        f(self.w_skip.as_mut_slice());
        f(self.we1.as_mut_slice());
        f(self.be1.as_mut_slice());
        f(self.we2.as_mut_slice());
        f(self.be2.as_mut_slice());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|s| n += s.len());
        n
    }

    /// Flat view in a fixed tensor order; used by the optimizer and the
    /// finite-difference checks.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_tensor(|s| out.extend_from_slice(s));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_tensor_mut(|s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

/// One topology's model inputs: normalized node/edge features plus the
/// incidence structure the layers aggregate over.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs {
    pub x: Vec<DVector<f64>>,
    pub eattr: Vec<DVector<f64>>,
    pub edges: Vec<(usize, usize)>,
    /// Per node: (incident edge id, opposite node).
    pub incident: Vec<Vec<(usize, usize)>>,
    /// Directed (node, edge, neighbor) triples in neighborhood order;
    /// messages and attention coefficients are indexed by this list.
    pairs: Vec<(usize, usize, usize)>,
    /// pair index range per node.
    pair_range: Vec<(usize, usize)>,
}

impl GraphInputs {
    pub fn new(grid: &Grid, node_feats: &[[f64; 3]], norm: &Normalization) -> Result<Self, NetError> {
        if node_feats.len() != grid.buses.len() {
            return Err(NetError::ShapeMismatch(format!(
                "{} feature rows for {} buses",
                node_feats.len(),
                grid.buses.len()
            )));
        }
        let x = node_feats
            .iter()
            .map(|row| {
                DVector::from_fn(NODE_FEATS, |f, _| (row[f] - norm.node_mean[f]) / norm.node_std[f])
            })
            .collect();
        let eattr = grid
            .branches
            .iter()
            .map(|br| {
                DVector::from_column_slice(&[
                    (br.r - norm.edge_mean[0]) / norm.edge_std[0],
                    (br.x - norm.edge_mean[1]) / norm.edge_std[1],
                ])
            })
            .collect();
        let edges: Vec<(usize, usize)> = grid.branches.iter().map(|b| (b.from_bus, b.to_bus)).collect();

        let mut incident = vec![Vec::new(); grid.buses.len()];
        for (e, &(i, j)) in edges.iter().enumerate() {
            incident[i].push((e, j));
            incident[j].push((e, i));
        }
        if let Some(i) = incident.iter().position(|v| v.is_empty()) {
            return Err(NetError::ShapeMismatch(format!("bus {i} has no incident branch")));
        }

        let mut pairs = Vec::with_capacity(2 * edges.len());
        let mut pair_range = Vec::with_capacity(incident.len());
        for (i, inc) in incident.iter().enumerate() {
            let start = pairs.len();
            for &(e, j) in inc {
                pairs.push((i, e, j));
            }
            pair_range.push((start, pairs.len()));
        }
        Ok(GraphInputs { x, eattr, edges, incident, pairs, pair_range })
    }

    pub fn n_nodes(&self) -> usize {
        self.x.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Cached intermediates of one forward pass, sufficient for exact
/// reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Per directed pair: message-MLP pre-activation W1·z + b1.
    msg_pre: Vec<DVector<f64>>,
    /// Aggregated embeddings x' per node.
    x1: Vec<DVector<f64>>,
    /// Per head, per directed pair: attention pre-activation W_a·t.
    att_pre: Vec<Vec<DVector<f64>>>,
    /// Per head, per directed pair: softmax coefficient within the
    /// receiving node's neighborhood.
    att_w: Vec<Vec<f64>>,
    /// Final node embeddings x̂ per node.
    xhat: Vec<DVector<f64>>,
    /// Per edge: decoder pre-activation.
    edge_pre: Vec<DVector<f64>>,
    /// Raw prediction before any projection.
    pub raw: Vec<f64>,
    n_nodes: usize,
    n_edges: usize,
}

fn lrelu(v: &DVector<f64>, slope: f64) -> DVector<f64> {
    v.map(|u| if u >= 0.0 { u } else { slope * u })
}

fn lrelu_grad(pre: &DVector<f64>, grad: &DVector<f64>, slope: f64) -> DVector<f64> {
    DVector::from_fn(pre.len(), |k, _| if pre[k] >= 0.0 { grad[k] } else { slope * grad[k] })
}

/// Message-passing stage alone: aggregated neighborhood embeddings x'.
/// Exposed for unit-level checks; `forward` runs the whole pipeline.
pub fn message_pass(
    params: &SurrogateParams,
    cfg: &NetConfig,
    g: &GraphInputs,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let h = cfg.hidden;
    let mut msg_pre = Vec::with_capacity(g.pairs.len());
    let mut x1 = vec![DVector::zeros(h); g.n_nodes()];
    for &(i, e, j) in &g.pairs {
        let mut z = DVector::zeros(2 * NODE_FEATS + EDGE_FEATS);
        z.rows_mut(0, NODE_FEATS).copy_from(&g.x[i]);
        z.rows_mut(NODE_FEATS, NODE_FEATS).copy_from(&g.x[j]);
        z.rows_mut(2 * NODE_FEATS, EDGE_FEATS).copy_from(&g.eattr[e]);
        let pre = &params.w1 * z + &params.b1;
        let msg = &params.w2 * lrelu(&pre, cfg.leaky_slope) + &params.b2;
        x1[i] += msg;
        msg_pre.push(pre);
    }
    (x1, msg_pre)
}

/// Attention stage alone: per-head softmax over each neighborhood and the
/// head-averaged refinement x''.
pub fn attention_refine(
    params: &SurrogateParams,
    cfg: &NetConfig,
    g: &GraphInputs,
    x1: &[DVector<f64>],
) -> (Vec<DVector<f64>>, Vec<Vec<DVector<f64>>>, Vec<Vec<f64>>) {
    let h = cfg.hidden;
    let n_pairs = g.pairs.len();
    let mut att_pre = vec![Vec::with_capacity(n_pairs); cfg.heads];
    let mut att_w = vec![vec![0.0; n_pairs]; cfg.heads];
    let mut x2 = vec![DVector::zeros(h); g.n_nodes()];

    for k in 0..cfg.heads {
        let mut logits = vec![0.0; n_pairs];
        for (p, &(i, e, j)) in g.pairs.iter().enumerate() {
            let mut t = DVector::zeros(2 * h + EDGE_FEATS);
            t.rows_mut(0, h).copy_from(&x1[i]);
            t.rows_mut(h, h).copy_from(&x1[j]);
            t.rows_mut(2 * h, EDGE_FEATS).copy_from(&g.eattr[e]);
            let pre = &params.w_att[k] * t;
            logits[p] = params.a_att[k].dot(&lrelu(&pre, cfg.leaky_slope));
            att_pre[k].push(pre);
        }
        for (i, &(start, end)) in g.pair_range.iter().enumerate() {
            let max = logits[start..end].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for p in start..end {
                att_w[k][p] = (logits[p] - max).exp();
                denom += att_w[k][p];
            }
            for p in start..end {
                att_w[k][p] /= denom;
                let (_, _, j) = g.pairs[p];
                x2[i].axpy(att_w[k][p] / cfg.heads as f64, &x1[j], 1.0);
            }
        }
    }
    (x2, att_pre, att_w)
}

/// Full forward pass. With `sys` present, the raw decoder output is pushed
/// through the global KCL projection; with `sys` absent the raw flows are
/// returned (the ablation configuration).
pub fn forward(
    params: &SurrogateParams,
    cfg: &NetConfig,
    g: &GraphInputs,
    sys: Option<&ConstraintSystem>,
) -> Result<(FlowSet, ForwardTape), NetError> {
    let h = cfg.hidden;
    let ne = g.n_edges();
    if let Some(sys) = sys {
        if sys.matrix.n_branch != ne || sys.matrix.n_bus != g.n_nodes() {
            return Err(NetError::ShapeMismatch(format!(
                "constraint system is {}x{} buses/branches, graph is {}x{}",
                sys.matrix.n_bus,
                sys.matrix.n_branch,
                g.n_nodes(),
                ne
            )));
        }
    }

    let (x1, msg_pre) = message_pass(params, cfg, g);
    let (x2, att_pre, att_w) = attention_refine(params, cfg, g, &x1);

    let xhat: Vec<DVector<f64>> =
        (0..g.n_nodes()).map(|i| &x2[i] + &params.w_skip * &g.x[i]).collect();

    let mut edge_pre = Vec::with_capacity(ne);
    let mut raw = vec![0.0; 4 * ne];
    for (e, &(i, j)) in g.edges.iter().enumerate() {
        let mut z = DVector::zeros(2 * h + EDGE_FEATS);
        z.rows_mut(0, h).copy_from(&xhat[i]);
        z.rows_mut(h, h).copy_from(&xhat[j]);
        z.rows_mut(2 * h, EDGE_FEATS).copy_from(&g.eattr[e]);
        let pre = &params.we1 * z + &params.be1;
        let out = &params.we2 * lrelu(&pre, cfg.leaky_slope) + &params.be2;
        raw[e] = out[0];
        raw[ne + e] = out[1];
        raw[2 * ne + e] = out[2];
        raw[3 * ne + e] = out[3];
        edge_pre.push(pre);
    }

    let output = match sys {
        Some(sys) => project_global(sys, &FlowSet(raw.clone()))?,
        None => FlowSet(raw.clone()),
    };

    let tape = ForwardTape {
        msg_pre,
        x1,
        att_pre,
        att_w,
        xhat,
        edge_pre,
        raw,
        n_nodes: g.n_nodes(),
        n_edges: ne,
    };
    Ok((output, tape))
}

/// Exact reverse-mode gradients for every parameter tensor, given the
/// upstream gradient with respect to the forward output (projected output
/// when `sys` is given, raw otherwise).
pub fn backward(
    params: &SurrogateParams,
    cfg: &NetConfig,
    g: &GraphInputs,
    tape: &ForwardTape,
    upstream: &[f64],
    sys: Option<&ConstraintSystem>,
) -> Result<SurrogateParams, NetError> {
    let h = cfg.hidden;
    let ne = g.n_edges();
    if tape.n_nodes != g.n_nodes() || tape.n_edges != ne || tape.msg_pre.len() != g.pairs.len() {
        return Err(NetError::StaleTape);
    }
    if upstream.len() != 4 * ne {
        return Err(NetError::ShapeMismatch(format!(
            "upstream gradient has length {}, expected {}",
            upstream.len(),
            4 * ne
        )));
    }

    let mut grads = params.zeros_like();

    // projection backward: the projector is its own transpose
    let g_raw: Vec<f64> = match sys {
        Some(sys) => project_global_backward(sys, upstream)?.0,
        None => upstream.to_vec(),
    };

    // edge decoder
    let mut g_xhat = vec![DVector::zeros(h); g.n_nodes()];
    for (e, &(i, j)) in g.edges.iter().enumerate() {
        let g_out = DVector::from_column_slice(&[
            g_raw[e],
            g_raw[ne + e],
            g_raw[2 * ne + e],
            g_raw[3 * ne + e],
        ]);
        let pre = &tape.edge_pre[e];
        let act = lrelu(pre, cfg.leaky_slope);
        grads.we2 += &g_out * act.transpose();
        grads.be2 += &g_out;
        let g_act = params.we2.transpose() * g_out;
        let g_pre = lrelu_grad(pre, &g_act, cfg.leaky_slope);
        let mut z = DVector::zeros(2 * h + EDGE_FEATS);
        z.rows_mut(0, h).copy_from(&tape.xhat[i]);
        z.rows_mut(h, h).copy_from(&tape.xhat[j]);
        z.rows_mut(2 * h, EDGE_FEATS).copy_from(&g.eattr[e]);
        grads.we1 += &g_pre * z.transpose();
        grads.be1 += &g_pre;
        let g_z = params.we1.transpose() * g_pre;
        g_xhat[i] += g_z.rows(0, h);
        g_xhat[j] += g_z.rows(h, h);
    }

    // skip connection: x̂_i = x''_i + W_skip x_i
    let mut g_x2 = Vec::with_capacity(g.n_nodes());
    for i in 0..g.n_nodes() {
        grads.w_skip += &g_xhat[i] * g.x[i].transpose();
        g_x2.push(g_xhat[i].clone());
    }

    // attention
    let mut g_x1 = vec![DVector::zeros(h); g.n_nodes()];
    let inv_heads = 1.0 / cfg.heads as f64;
    for k in 0..cfg.heads {
        for (i, &(start, end)) in g.pair_range.iter().enumerate() {
            // value path and coefficient gradients
            let mut g_w = vec![0.0; end - start];
            for p in start..end {
                let (_, _, j) = g.pairs[p];
                g_w[p - start] = inv_heads * g_x2[i].dot(&tape.x1[j]);
                g_x1[j].axpy(inv_heads * tape.att_w[k][p], &g_x2[i], 1.0);
            }
            // softmax backward within the neighborhood
            let dot: f64 =
                (start..end).map(|p| tape.att_w[k][p] * g_w[p - start]).sum();
            for p in start..end {
                let g_logit = tape.att_w[k][p] * (g_w[p - start] - dot);
                if g_logit == 0.0 {
                    continue;
                }
                let (_, e, j) = g.pairs[p];
                let pre = &tape.att_pre[k][p];
                let act = lrelu(pre, cfg.leaky_slope);
                grads.a_att[k].axpy(g_logit, &act, 1.0);
                let g_act = &params.a_att[k] * g_logit;
                let g_pre = lrelu_grad(pre, &g_act, cfg.leaky_slope);
                let mut t = DVector::zeros(2 * h + EDGE_FEATS);
                t.rows_mut(0, h).copy_from(&tape.x1[i]);
                t.rows_mut(h, h).copy_from(&tape.x1[j]);
                t.rows_mut(2 * h, EDGE_FEATS).copy_from(&g.eattr[e]);
                grads.w_att[k] += &g_pre * t.transpose();
                let g_t = params.w_att[k].transpose() * g_pre;
                g_x1[i] += g_t.rows(0, h);
                g_x1[j] += g_t.rows(h, h);
            }
        }
    }

    // message MLP
    for (p, &(i, _e, _j)) in g.pairs.iter().enumerate() {
        let g_msg = &g_x1[i];
        let pre = &tape.msg_pre[p];
        let act = lrelu(pre, cfg.leaky_slope);
        grads.w2 += g_msg * act.transpose();
        grads.b2 += g_msg;
        let g_act = params.w2.transpose() * g_msg;
        let g_pre = lrelu_grad(pre, &g_act, cfg.leaky_slope);
        let (pi, e, pj) = g.pairs[p];
        let mut z = DVector::zeros(2 * NODE_FEATS + EDGE_FEATS);
        z.rows_mut(0, NODE_FEATS).copy_from(&g.x[pi]);
        z.rows_mut(NODE_FEATS, NODE_FEATS).copy_from(&g.x[pj]);
        z.rows_mut(2 * NODE_FEATS, EDGE_FEATS).copy_from(&g.eattr[e]);
        grads.w1 += &g_pre * z.transpose();
        grads.b1 += &g_pre;
    }

    Ok(grads)
}
