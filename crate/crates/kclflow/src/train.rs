//! Training loop (AdamW on pure MSE through the optional projection),
//! metric computation (MSE, L_P, L_Q, L_KCL), checkpointing, and
//! multi-run evaluation with mean/std reporting.

use crate::acpf::FlowSet;
use crate::grid::Grid;
use crate::net::{backward, forward, GraphInputs, NetConfig, NetError, SurrogateParams};
use crate::projection::{build_system, kcl_residual, ConstraintSystem, SystemCache};
use crate::scenario::{Dataset, Normalization, Regime, Scenario, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training requires an N-regime dataset; N-1 cases are evaluation-only")]
    Regime,
    #[error("dataset has no normalization stats; split it before training")]
    MissingNormalization,
    #[error("dataset has no scenarios in the {0:?} split")]
    EmptySplit(Split),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint normalization disagrees with the dataset header")]
    TopologyMismatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Projection(#[from] crate::projection::ProjectionError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Optimizer and loop hyperparameters. lr/betas/eps follow the usual AdamW
/// defaults; batch size, epochs, and weight decay are recorded defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub with_projection: bool,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            with_projection: true,
            grad_clip: None,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        AdamWState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One AdamW update: decoupled decay first (param *= 1 - lr*wd), then the
/// bias-corrected Adam step.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, cfg: &TrainConfig) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        params[i] *= 1.0 - cfg.lr * cfg.weight_decay;
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Batched mean-squared error in raw per-unit flows, with the gradient of
/// the scalar with respect to every prediction component.
pub fn mse_loss(pred: &[FlowSet], target: &[FlowSet]) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let count: usize = pred.iter().map(|p| p.0.len()).sum();
    if count == 0 {
        return Err(TrainError::ShapeMismatch("empty batch".into()));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        if p.0.len() != t.0.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "prediction length {} vs target {}",
                p.0.len(),
                t.0.len()
            )));
        }
        let mut g = Vec::with_capacity(p.0.len());
        for (a, b) in p.0.iter().zip(&t.0) {
            let d = a - b;
            loss += d * d;
            g.push(2.0 * d / count as f64);
        }
        grads.push(g);
    }
    Ok((loss / count as f64, grads))
}

/// L_P = (1/N) Σ_i (P_net(i) + P_calc(i))², L_Q analogous,
/// L_KCL = (L_P + L_Q) / 2. `sys.b` already stores P_net/Q_net with the
/// sign that makes the residual A·y + b equal the mismatch.
pub fn kcl_metric_sys(sys: &ConstraintSystem, pred: &FlowSet) -> Result<(f64, f64, f64), TrainError> {
    let r = kcl_residual(sys, pred)?;
    let n = sys.matrix.n_bus;
    let l_p = r.rows(0, n).iter().map(|v| v * v).sum::<f64>() / n as f64;
    let l_q = r.rows(n, n).iter().map(|v| v * v).sum::<f64>() / n as f64;
    Ok((l_p, l_q, 0.5 * (l_p + l_q)))
}

pub fn kcl_metric(
    grid: &Grid,
    net_p: &[f64],
    net_q: &[f64],
    pred: &FlowSet,
) -> Result<(f64, f64, f64), TrainError> {
    let sys = build_system(grid, net_p, net_q)?;
    kcl_metric_sys(&sys, pred)
}

/// Topology-independent model artifact: architecture, the train-split
/// normalization stats, and the parameters. The projection layer binds at
/// load time per topology, so one checkpoint serves N and N-1 evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub net: NetConfig,
    pub normalization: Normalization,
    pub params: SurrogateParams,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<(), TrainError> {
        Ok(std::fs::write(path, serde_json::to_string(self)?)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint, TrainError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_l_kcl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Everything the model needs for one scenario: normalized graph inputs,
/// the bound constraint system (projection and metrics), and the target.
struct ScenarioCtx {
    graph: GraphInputs,
    sys: ConstraintSystem,
    target: FlowSet,
}

/// Per-topology grids and constraint matrices are cached by removed
/// branch; for an N dataset there is exactly one entry.
fn build_contexts(
    base: &Grid,
    scenarios: &[&Scenario],
    norm: &Normalization,
) -> Result<Vec<ScenarioCtx>, TrainError> {
    let cache = SystemCache::new();
    let mut grids: HashMap<Option<usize>, Grid> = HashMap::new();
    let mut out = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        if !grids.contains_key(&s.removed_branch) {
            let g = match s.removed_branch {
                Some(e) => base.remove_branch(e)?,
                None => base.clone(),
            };
            grids.insert(s.removed_branch, g);
        }
        let grid = &grids[&s.removed_branch];
        let graph = GraphInputs::new(grid, &s.node_inputs, norm)?;
        let sys = cache.system(grid, &s.net_p, &s.net_q)?;
        out.push(ScenarioCtx { graph, sys, target: s.target_flows.clone() });
    }
    Ok(out)
}

fn split_or_all<'a>(ds: &'a Dataset, split: Split) -> Vec<&'a Scenario> {
    let tagged = ds.scenarios_in(split);
    if tagged.is_empty() && ds.scenarios.iter().all(|s| s.split.is_none()) {
        ds.scenarios.iter().collect()
    } else {
        tagged
    }
}

fn eval_contexts(
    params: &SurrogateParams,
    net: &NetConfig,
    ctxs: &[ScenarioCtx],
    with_projection: bool,
) -> Result<(f64, f64, f64), TrainError> {
    let mut mse = 0.0;
    let mut l_p = 0.0;
    let mut l_q = 0.0;
    for ctx in ctxs {
        let sys = with_projection.then_some(&ctx.sys);
        let (out, _) = forward(params, net, &ctx.graph, sys)?;
        let n = out.0.len() as f64;
        mse += out.0.iter().zip(&ctx.target.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let (p, q, _) = kcl_metric_sys(&ctx.sys, &out)?;
        l_p += p;
        l_q += q;
    }
    let n = ctxs.len() as f64;
    Ok((mse / n, l_p / n, l_q / n))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    // splitmix64 over (seed, epoch) so shuffles are independent per epoch
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Mini-batch AdamW on pure MSE through the forward pass (projected when
/// configured). Deterministic given the config: init, shuffles, and the
/// gradient reduction order are all fixed by `cfg.seed`.
pub fn train(
    grid: &Grid,
    ds: &Dataset,
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if ds.header.regime != Regime::N {
        return Err(TrainError::Regime);
    }
    let norm = ds.header.normalization.clone().ok_or(TrainError::MissingNormalization)?;
    let train_scn = ds.scenarios_in(Split::Train);
    if train_scn.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let train_ctx = build_contexts(grid, &train_scn, &norm)?;
    let val_ctx = build_contexts(grid, &ds.scenarios_in(Split::Val), &norm)?;

    let mut params = SurrogateParams::init(net, cfg.seed);
    let mut flat = params.to_flat();
    let mut state = AdamWState::new(flat.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_ctx.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut epoch_sq = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut grad_acc = vec![0.0; flat.len()];
            let mut batch_loss = 0.0;
            for &idx in batch {
                let ctx = &train_ctx[idx];
                let sys = cfg.with_projection.then_some(&ctx.sys);
                let (out, tape) = forward(&params, net, &ctx.graph, sys)?;
                let count = out.0.len() as f64;
                let mut upstream = Vec::with_capacity(out.0.len());
                let mut loss = 0.0;
                for (a, b) in out.0.iter().zip(&ctx.target.0) {
                    let d = a - b;
                    loss += d * d;
                    upstream.push(2.0 * d / count);
                }
                loss /= count;
                batch_loss += loss;
                let g = backward(&params, net, &ctx.graph, &tape, &upstream, sys)?;
                let gf = g.to_flat();
                let w = 1.0 / batch.len() as f64;
                for (acc, gi) in grad_acc.iter_mut().zip(&gf) {
                    *acc += w * gi;
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no });
            }
            epoch_sq += batch_loss * batch.len() as f64;
            if let Some(clip) = cfg.grad_clip {
                let norm2: f64 = grad_acc.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm2 > clip {
                    let scale = clip / norm2;
                    grad_acc.iter_mut().for_each(|g| *g *= scale);
                }
            }
            adamw_step(&mut flat, &grad_acc, &mut state, cfg);
            params.assign_flat(&flat);
        }
        let train_mse = epoch_sq / train_ctx.len() as f64;
        // val metrics fall back to the train split when no val split exists
        let vc = if val_ctx.is_empty() { &train_ctx } else { &val_ctx };
        let (val_mse, l_p, l_q) = eval_contexts(&params, net, vc, cfg.with_projection)?;
        log.push(EpochLog { epoch, train_mse, val_mse, val_l_kcl: 0.5 * (l_p + l_q) });
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            net: net.clone(),
            normalization: norm,
            params,
        },
        log,
    })
}

/// Metrics of one model over one dataset's test scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub mse: f64,
    pub l_p: f64,
    pub l_q: f64,
    pub kcl_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub with_projection: bool,
    pub runs: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub l_p_mean: f64,
    pub l_p_std: f64,
    pub l_q_mean: f64,
    pub l_q_std: f64,
    pub kcl_mean: f64,
    pub kcl_std: f64,
    pub per_run: Vec<RunMetrics>,
}

/// Score a checkpoint over the test scenarios of `ds` (all scenarios when
/// the dataset carries no split tags). The checkpoint's own normalization
/// is applied to the inputs; a dataset carrying different stats is
/// rejected.
pub fn evaluate_checkpoint(
    grid: &Grid,
    ckpt: &Checkpoint,
    ds: &Dataset,
    with_projection: bool,
) -> Result<RunMetrics, TrainError> {
    if let Some(ds_norm) = &ds.header.normalization {
        if *ds_norm != ckpt.normalization {
            return Err(TrainError::TopologyMismatch);
        }
    }
    let scenarios = split_or_all(ds, Split::Test);
    if scenarios.is_empty() {
        return Err(TrainError::EmptySplit(Split::Test));
    }
    let ctxs = build_contexts(grid, &scenarios, &ckpt.normalization)?;
    let (mse, l_p, l_q) = eval_contexts(&ckpt.params, &ckpt.net, &ctxs, with_projection)?;
    Ok(RunMetrics { seed: 0, mse, l_p, l_q, kcl_violation: 0.5 * (l_p + l_q) })
}

fn mean_std(vals: impl Fn(&RunMetrics) -> f64, runs: &[RunMetrics]) -> (f64, f64) {
    let n = runs.len() as f64;
    let mean = runs.iter().map(&vals).sum::<f64>() / n;
    let var = runs.iter().map(|r| (vals(r) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Tables-style protocol: `runs` independent train+evaluate repetitions
/// with seeds 0..runs, reporting mean and population std per metric. The
/// test dataset may be the training dataset's own test split or a separate
/// (e.g. N-1) dataset without split tags.
pub fn evaluate(
    grid: &Grid,
    train_ds: &Dataset,
    test_ds: &Dataset,
    net: &NetConfig,
    base_cfg: &TrainConfig,
    runs: usize,
) -> Result<EvalReport, TrainError> {
    if runs == 0 {
        return Err(TrainError::ShapeMismatch("runs must be >= 1".into()));
    }
    let mut per_run = Vec::with_capacity(runs);
    for seed in 0..runs as u64 {
        let cfg = TrainConfig { seed, ..base_cfg.clone() };
        let outcome = train(grid, train_ds, net, &cfg)?;
        // the test dataset keeps its own stats only if they match training
        let mut run =
            evaluate_checkpoint(grid, &outcome.checkpoint, test_ds, cfg.with_projection)?;
        run.seed = seed;
        per_run.push(run);
    }
    let (mse_mean, mse_std) = mean_std(|r| r.mse, &per_run);
    let (l_p_mean, l_p_std) = mean_std(|r| r.l_p, &per_run);
    let (l_q_mean, l_q_std) = mean_std(|r| r.l_q, &per_run);
    let (kcl_mean, kcl_std) = mean_std(|r| r.kcl_violation, &per_run);
    Ok(EvalReport {
        regime: test_ds.header.regime,
        with_projection: base_cfg.with_projection,
        runs,
        mse_mean,
        mse_std,
        l_p_mean,
        l_p_std,
        l_q_mean,
        l_q_std,
        kcl_mean,
        kcl_std,
        per_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Bus, BusKind};
    use crate::scenario::{make_dataset, split_dataset, SamplingConfig};
    use approx::assert_abs_diff_eq;

    fn small_grid() -> Grid {
        Grid::new(
            100.0,
            vec![
                Bus { id: 0, kind: BusKind::Slack, p_nom: 0.0, q_nom: 0.0, vm_nom: 1.02, va_nom: 0.0 },
                Bus { id: 1, kind: BusKind::Generator, p_nom: 0.3, q_nom: 0.0, vm_nom: 1.01, va_nom: 0.0 },
                Bus { id: 2, kind: BusKind::Load, p_nom: -0.35, q_nom: -0.1, vm_nom: 1.0, va_nom: 0.0 },
                Bus { id: 3, kind: BusKind::Load, p_nom: -0.25, q_nom: -0.05, vm_nom: 1.0, va_nom: 0.0 },
            ],
            vec![
                Branch { id: 0, from_bus: 0, to_bus: 1, r: 0.01, x: 0.08 },
                Branch { id: 1, from_bus: 0, to_bus: 2, r: 0.02, x: 0.1 },
                Branch { id: 2, from_bus: 1, to_bus: 2, r: 0.015, x: 0.09 },
                Branch { id: 3, from_bus: 1, to_bus: 3, r: 0.02, x: 0.11 },
                Branch { id: 4, from_bus: 2, to_bus: 3, r: 0.025, x: 0.12 },
            ],
        )
        .unwrap()
    }

    fn small_net() -> NetConfig {
        NetConfig { hidden: 8, heads: 2, attn_dim: 6, leaky_slope: 0.01 }
    }

    fn tiny_dataset(grid: &Grid, count: usize, seed: u64) -> Dataset {
        let ds = make_dataset(grid, count, Regime::N, seed, &SamplingConfig::default(), 1).unwrap();
        split_dataset(&ds, grid, (0.6, 0.2, 0.2), seed).unwrap()
    }

    #[test]
    fn adamw_zero_grads_no_decay_is_identity() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = vec![0.5, -0.25, 1.0];
        let orig = p.clone();
        let mut st = AdamWState::new(3);
        adamw_step(&mut p, &[0.0; 3], &mut st, &cfg);
        assert_eq!(p, orig);
    }

    #[test]
    fn adamw_matches_hand_computed_single_step() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let g = 0.3;
        let mut p = vec![1.0];
        let mut st = AdamWState::new(1);
        adamw_step(&mut p, &[g], &mut st, &cfg);
        // t=1: m_hat = g, v_hat = g^2  =>  p -= lr * g/(|g| + eps)
        let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert_abs_diff_eq!(p[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = vec![2.0];
        let mut st = AdamWState::new(1);
        adamw_step(&mut p, &[0.0], &mut st, &cfg);
        assert_abs_diff_eq!(p[0], 2.0 * (1.0 - cfg.lr * 0.1), epsilon = 1e-15);
    }

    #[test]
    fn mse_trivial_cases() {
        let a = vec![FlowSet(vec![1.0, 2.0, 3.0, 4.0])];
        let (zero, _) = mse_loss(&a, &a).unwrap();
        assert_eq!(zero, 0.0);
        let b = vec![FlowSet(vec![2.0, 3.0, 4.0, 5.0])];
        let (one, g) = mse_loss(&b, &a).unwrap();
        assert_abs_diff_eq!(one, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0][0], 2.0 / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn mse_matches_naive_resummation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<FlowSet> = (0..3)
            .map(|_| FlowSet((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let tgt: Vec<FlowSet> = (0..3)
            .map(|_| FlowSet((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let (loss, _) = mse_loss(&pred, &tgt).unwrap();
        let mut naive = 0.0;
        let mut n = 0usize;
        for (p, t) in pred.iter().zip(&tgt) {
            for (a, b) in p.0.iter().zip(&t.0) {
                naive += (a - b) * (a - b);
                n += 1;
            }
        }
        assert_abs_diff_eq!(loss, naive / n as f64, epsilon = 1e-12);
    }

    #[test]
    fn kcl_metric_ground_truth_is_feasible() {
        let grid = small_grid();
        let ds = tiny_dataset(&grid, 4, 1);
        for s in &ds.scenarios {
            let (_, _, l_kcl) = kcl_metric(&grid, &s.net_p, &s.net_q, &s.target_flows).unwrap();
            assert!(l_kcl <= 1e-12, "ground truth L_KCL {l_kcl}");
        }
    }

    #[test]
    fn kcl_metric_single_bus_perturbation() {
        let grid = small_grid();
        let ds = make_dataset(&grid, 1, Regime::N, 5, &SamplingConfig::default(), 1).unwrap();
        let s = &ds.scenarios[0];
        let mut y = s.target_flows.clone();
        let delta = 0.17;
        // bus 3 touches branches 3 (to side) and 4 (to side); perturb one
        y.0[grid.branches.len() + 3] += delta;
        let (l_p, l_q, l_kcl) = kcl_metric(&grid, &s.net_p, &s.net_q, &y).unwrap();
        let n = grid.buses.len() as f64;
        assert_abs_diff_eq!(l_p, delta * delta / n, epsilon = 1e-10);
        assert!(l_q < 1e-12);
        assert_abs_diff_eq!(l_kcl, 0.5 * l_p, epsilon = 1e-10);
    }

    #[test]
    fn train_rejects_contingency_datasets() {
        let grid = small_grid();
        let ds = make_dataset(&grid, 3, Regime::N1, 2, &SamplingConfig::default(), 1).unwrap();
        let ds = split_dataset(&ds, &grid, (1.0, 0.0, 0.0), 0).unwrap();
        let err = train(&grid, &ds, &small_net(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::Regime));
    }

    #[test]
    fn zero_lr_zero_decay_leaves_init_untouched() {
        let grid = small_grid();
        let ds = tiny_dataset(&grid, 6, 3);
        let net = small_net();
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, epochs: 1, seed: 4, ..TrainConfig::default() };
        let out = train(&grid, &ds, &net, &cfg).unwrap();
        assert_eq!(out.checkpoint.params, SurrogateParams::init(&net, 4));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let grid = small_grid();
        let ds = tiny_dataset(&grid, 24, 7);
        let net = small_net();
        let cfg = TrainConfig { epochs: 40, batch_size: 8, seed: 1, ..TrainConfig::default() };
        let a = train(&grid, &ds, &net, &cfg).unwrap();
        let b = train(&grid, &ds, &net, &cfg).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
        let first = a.log.first().unwrap().train_mse;
        let last = a.log.last().unwrap().train_mse;
        assert!(last < first, "no improvement: {first} -> {last}");
        // hard constraint holds at every epoch regardless of learning
        for e in &a.log {
            assert!(e.val_l_kcl <= 1e-10, "epoch {} L_KCL {}", e.epoch, e.val_l_kcl);
        }
    }

    #[test]
    fn ablation_logs_nonzero_kcl() {
        let grid = small_grid();
        let ds = tiny_dataset(&grid, 12, 9);
        let net = small_net();
        let cfg =
            TrainConfig { epochs: 3, with_projection: false, seed: 2, ..TrainConfig::default() };
        let out = train(&grid, &ds, &net, &cfg).unwrap();
        assert!(out.log.iter().all(|e| e.val_l_kcl > 0.0));
    }

    #[test]
    fn checkpoint_round_trips_through_json() {
        let net = small_net();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            net: net.clone(),
            normalization: Normalization {
                node_mean: [0.1, -0.2, 1.0],
                node_std: [0.5, 0.4, 0.02],
                edge_mean: [0.02, 0.1],
                edge_std: [0.005, 0.01],
            },
            params: SurrogateParams::init(&net, 3),
        };
        let text = serde_json::to_string(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn evaluate_reports_are_reproducible_and_consistent() {
        let grid = small_grid();
        let ds = tiny_dataset(&grid, 20, 11);
        let net = small_net();
        let cfg = TrainConfig { epochs: 4, batch_size: 8, ..TrainConfig::default() };
        let a = evaluate(&grid, &ds, &ds, &net, &cfg, 2).unwrap();
        let b = evaluate(&grid, &ds, &ds, &net, &cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs, 2);
        for r in &a.per_run {
            assert_abs_diff_eq!(r.kcl_violation, 0.5 * (r.l_p + r.l_q), epsilon = 1e-15);
        }
        // serialization round trip
        let text = serde_json::to_string(&a).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn evaluate_on_contingency_dataset_uses_checkpoint_norm() {
        let grid = small_grid();
        let train_ds = tiny_dataset(&grid, 16, 13);
        let n1 = make_dataset(&grid, 6, Regime::N1, 21, &SamplingConfig::default(), 1).unwrap();
        let net = small_net();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let report = evaluate(&grid, &train_ds, &n1, &net, &cfg, 1).unwrap();
        assert_eq!(report.regime, Regime::N1);
        assert!(report.kcl_mean <= 1e-10, "projected N-1 KCL {}", report.kcl_mean);
        assert!(report.mse_mean.is_finite());
    }

    #[test]
    fn mismatched_normalization_is_rejected() {
        let grid = small_grid();
        let ds_a = tiny_dataset(&grid, 10, 1);
        let ds_b = tiny_dataset(&grid, 10, 99);
        let net = small_net();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let out = train(&grid, &ds_a, &net, &cfg).unwrap();
        let err = evaluate_checkpoint(&grid, &out.checkpoint, &ds_b, true).unwrap_err();
        assert!(matches!(err, TrainError::TopologyMismatch));
    }
}
