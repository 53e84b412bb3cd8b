//! Labeled dataset generation: perturbed operating points around nominal
//! values, optional N-1 line removal, Newton-Raphson labels, and JSONL
//! persistence.
//!
//! Every scenario derives its random stream from (dataset seed, index,
//! attempt), so output is independent of worker scheduling and divergent
//! draws are redrawn deterministically.

use crate::acpf::{branch_flows, nr_solve, FlowSet, PfInputs};
use crate::grid::{BusKind, Grid, GridError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("too many divergent samples: {attempts} attempts for {target} scenarios")]
    TooManyDivergences { attempts: usize, target: usize },
    #[error("no branch is eligible for N-1 removal")]
    NoEligibleBranch,
    #[error("split fractions must sum to 1, got {0}")]
    BadFractions(f64),
    #[error("split {0} would be empty")]
    EmptySplit(&'static str),
    #[error("dataset has no scenarios")]
    Empty,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file has no header line")]
    MissingHeader,
}

/// Operating regime of a dataset: nominal topology or single-line outages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    N,
    N1,
}

/// How perturbed inputs are drawn. `sigma` is the standard deviation of
/// the normal perturbation around nominal values; the published variance
/// reading of 0.01 corresponds to sigma = 0.1. Recorded in the dataset
/// header so either interpretation can be regenerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub sigma: f64,
    pub vm_min: f64,
    pub vm_max: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { sigma: 0.1, vm_min: 0.8, vm_max: 1.2 }
    }
}

/// One labeled operating sample.
///
/// `node_inputs` carries the (P, Q, Vm) feature triple per bus, taken from
/// the sampled/solved state: quantities that are solver inputs hold their
/// sampled values, quantities the solver determines (slack P/Q, generator
/// Q, load Vm) hold the solved values, so the feature matrix is consistent
/// with the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub grid_ref: String,
    pub removed_branch: Option<usize>,
    pub node_inputs: Vec<[f64; 3]>,
    pub target_flows: FlowSet,
    /// P_net per bus: minus the solved net injection, so A y + b = 0.
    pub net_p: Vec<f64>,
    pub net_q: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-feature z-score statistics, computed on the train split for node
/// features and on the base grid's branches for edge features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub node_mean: [f64; 3],
    pub node_std: [f64; 3],
    pub edge_mean: [f64; 2],
    pub edge_std: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub topology_hash: String,
    pub regime: Regime,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenarios: Vec<Scenario>,
}

/// Draws per-bus (P, Q, Vm) around nominal values. The slack keeps its
/// nominal voltage; its P and Q are outputs of the solve and are not drawn.
pub fn sample_scenario(grid: &Grid, cfg: &SamplingConfig, seed: u64) -> PfInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = PfInputs::nominal(grid);
    for bus in &grid.buses {
        if bus.kind == BusKind::Slack {
            continue;
        }
        let i = bus.id;
        inputs.p[i] = Normal::new(bus.p_nom, cfg.sigma).unwrap().sample(&mut rng);
        inputs.q[i] = Normal::new(bus.q_nom, cfg.sigma).unwrap().sample(&mut rng);
        inputs.vm[i] = Normal::new(bus.vm_nom, cfg.sigma)
            .unwrap()
            .sample(&mut rng)
            .clamp(cfg.vm_min, cfg.vm_max);
    }
    inputs
}

/// Branches whose removal keeps the grid connected and does not touch the
/// slack bus.
pub fn eligible_contingencies(grid: &Grid) -> Vec<usize> {
    let slack = grid.slack_bus();
    grid.branches
        .iter()
        .filter(|br| br.from_bus != slack && br.to_bus != slack)
        .filter(|br| grid.check_connected(Some(br.id)))
        .map(|br| br.id)
        .collect()
}

fn stream_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    // splitmix64 over the packed identifiers
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(attempt.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub const NR_TOL: f64 = 1e-8;
pub const NR_MAX_ITER: usize = 20;

/// Generates one scenario for (seed, index), redrawing on divergence.
/// Returns the scenario and the number of attempts consumed.
fn generate_one(
    grid: &Grid,
    cfg: &SamplingConfig,
    regime: Regime,
    seed: u64,
    index: u64,
    max_attempts: usize,
) -> Result<(Scenario, usize), DatasetError> {
    let eligible = match regime {
        Regime::N => Vec::new(),
        Regime::N1 => {
            let e = eligible_contingencies(grid);
            if e.is_empty() {
                return Err(DatasetError::NoEligibleBranch);
            }
            e
        }
    };
    for attempt in 0..max_attempts {
        let s = stream_seed(seed, index, attempt as u64);
        let inputs = sample_scenario(grid, cfg, s);
        let (solve_grid, removed) = match regime {
            Regime::N => (grid.clone(), None),
            Regime::N1 => {
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xa5a5_5a5a_a5a5_5a5a);
                let pick = eligible[rng.random_range(0..eligible.len())];
                (grid.remove_branch(pick)?, Some(pick))
            }
        };
        let sol = match nr_solve(&solve_grid, &inputs, NR_TOL, NR_MAX_ITER) {
            Ok(sol) => sol,
            Err(_) => continue,
        };
        let flows = branch_flows(&solve_grid, &sol);
        let node_inputs = solve_grid
            .buses
            .iter()
            .map(|bus| {
                let i = bus.id;
                match bus.kind {
                    // every output slot carries the solved value
                    BusKind::Slack => [sol.p_inj[i], sol.q_inj[i], sol.vm[i]],
                    BusKind::Generator => [inputs.p[i], sol.q_inj[i], inputs.vm[i]],
                    BusKind::Load => [inputs.p[i], inputs.q[i], sol.vm[i]],
                }
            })
            .collect();
        let scenario = Scenario {
            grid_ref: solve_grid.topology_hash(),
            removed_branch: removed,
            node_inputs,
            target_flows: flows,
            net_p: sol.p_inj.iter().map(|p| -p).collect(),
            net_q: sol.q_inj.iter().map(|q| -q).collect(),
            seed: s,
            split: None,
        };
        return Ok((scenario, attempt + 1));
    }
    Err(DatasetError::TooManyDivergences { attempts: max_attempts, target: 1 })
}

/// Generates `count` labeled scenarios. Divergent draws are discarded and
/// redrawn, bounded by 10× count attempts in total.
pub fn make_dataset(
    grid: &Grid,
    count: usize,
    regime: Regime,
    seed: u64,
    cfg: &SamplingConfig,
    workers: usize,
) -> Result<Dataset, DatasetError> {
    let budget_per_index = 10.max(10 * count / count.max(1));
    let indices: Vec<u64> = (0..count as u64).collect();
    let workers = workers.max(1).min(count.max(1));

    let results: Vec<Result<(Scenario, usize), DatasetError>> = if workers == 1 {
        indices
            .iter()
            .map(|&i| generate_one(grid, cfg, regime, seed, i, budget_per_index))
            .collect()
    } else {
        let mut out: Vec<Option<Result<(Scenario, usize), DatasetError>>> = Vec::new();
        out.resize_with(count, || None);
        let chunks: Vec<&[u64]> = indices.chunks(count.div_ceil(workers)).collect();
        let mut slices: Vec<&mut [Option<_>]> = Vec::new();
        let mut rest = out.as_mut_slice();
        for c in &chunks {
            let (head, tail) = rest.split_at_mut(c.len());
            slices.push(head);
            rest = tail;
        }
        std::thread::scope(|scope| {
            for (chunk, slice) in chunks.into_iter().zip(slices) {
                scope.spawn(move || {
                    for (k, &i) in chunk.iter().enumerate() {
                        slice[k] = Some(generate_one(grid, cfg, regime, seed, i, budget_per_index));
                    }
                });
            }
        });
        out.into_iter().map(|r| r.unwrap()).collect()
    };

    let mut scenarios = Vec::with_capacity(count);
    let mut attempts = 0usize;
    for r in results {
        let (s, a) = r?;
        attempts += a;
        if attempts > 10 * count {
            return Err(DatasetError::TooManyDivergences { attempts, target: count });
        }
        scenarios.push(s);
    }

    Ok(Dataset {
        header: DatasetHeader {
            topology_hash: grid.topology_hash(),
            regime,
            sampling: cfg.clone(),
            seed,
            normalization: None,
        },
        scenarios,
    })
}

/// Deterministic shuffle-and-partition into train/val/test; normalization
/// stats are computed on the train split only.
pub fn split_dataset(
    ds: &Dataset,
    grid: &Grid,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Dataset, DatasetError> {
    let (ft, fv, fe) = fractions;
    let total = ft + fv + fe;
    if (total - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(total));
    }
    let n = ds.scenarios.len();
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, count, frac) in
        [("train", n_train, ft), ("val", n_val, fv), ("test", n_test, fe)]
    {
        if frac > 0.0 && count == 0 {
            return Err(DatasetError::EmptySplit(name));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = ds.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.scenarios[idx].split = Some(if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    out.header.normalization = Some(compute_normalization(&out, grid, Split::Train));
    Ok(out)
}

/// Node stats over the (scenario × bus) feature rows of one split; edge
/// stats over the base grid's branch parameters.
pub fn compute_normalization(ds: &Dataset, grid: &Grid, split: Split) -> Normalization {
    let rows: Vec<&[f64; 3]> = ds
        .scenarios
        .iter()
        .filter(|s| s.split == Some(split) || s.split.is_none())
        .flat_map(|s| s.node_inputs.iter())
        .collect();
    let mut node_mean = [0.0; 3];
    let mut node_std = [1.0; 3];
    if !rows.is_empty() {
        for f in 0..3 {
            let mean = rows.iter().map(|r| r[f]).sum::<f64>() / rows.len() as f64;
            let var =
                rows.iter().map(|r| (r[f] - mean).powi(2)).sum::<f64>() / rows.len() as f64;
            node_mean[f] = mean;
            node_std[f] = var.sqrt().max(1e-8);
        }
    }
    let ne = grid.branches.len() as f64;
    let mut edge_mean = [0.0; 2];
    let mut edge_std = [1.0; 2];
    let fields: [(usize, fn(&crate::grid::Branch) -> f64); 2] =
        [(0, |b| b.r), (1, |b| b.x)];
    for (f, get) in fields {
        let mean = grid.branches.iter().map(get).sum::<f64>() / ne;
        let var = grid.branches.iter().map(|b| (get(b) - mean).powi(2)).sum::<f64>() / ne;
        edge_mean[f] = mean;
        edge_std[f] = var.sqrt().max(1e-8);
    }
    Normalization { node_mean, node_std, edge_mean, edge_std }
}

impl Dataset {
    pub fn scenarios_in(&self, split: Split) -> Vec<&Scenario> {
        self.scenarios.iter().filter(|s| s.split == Some(split)).collect()
    }

    /// JSON-lines: header line, then one scenario per line.
    pub fn to_jsonl(&self) -> Result<String, DatasetError> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for s in &self.scenarios {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Dataset, DatasetError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: DatasetHeader =
            serde_json::from_str(lines.next().ok_or(DatasetError::MissingHeader)?)?;
        let scenarios: Result<Vec<Scenario>, _> = lines.map(serde_json::from_str).collect();
        Ok(Dataset { header, scenarios: scenarios? })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset, DatasetError> {
        Dataset::from_jsonl(&std::fs::read_to_string(path)?)
    }
}
