//! Removal of sub-threshold structures after ADMM pruning, cross-layer
//! propagation of removed filters, and physical shrinking of the network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::model::{evaluate_accuracy, ConvLayer, Dataset, FcLayer, Layer, Network};
use crate::sa::{anneal, AnnealProblem, SaConfig};
use crate::schemes::{column_channels, column_norms, filter_norms, objective_count, propagate_channels, MaskSet, Objective};
use crate::tensor::{ConvGeometry, Tensor};

/// Column-wise and filter-wise L2-norm thresholds of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Thresholds {
    pub column: f64,
    pub filter: f64,
}

/// Per-layer thresholds, keyed by layer index. Missing layers use zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PurifyConfig {
    pub thresholds: BTreeMap<usize, Thresholds>,
}

impl PurifyConfig {
    pub fn is_zero(&self) -> bool {
        self.thresholds.values().all(|t| t.column == 0.0 && t.filter == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (li, t) in &self.thresholds {
            if !(t.column.is_finite() && t.filter.is_finite() && t.column >= 0.0 && t.filter >= 0.0) {
                return Err(Error::Config(format!("layer {li}: thresholds must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Removed filter and column indices of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Removal {
    pub filters: Vec<usize>,
    pub columns: Vec<usize>,
}

fn below(norms: &[f64], tau: f64) -> Vec<usize> {
    let mut removed: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] < tau).collect();
    if removed.len() == norms.len() && !norms.is_empty() {
        // Keep the strongest structure (lowest index on ties).
        let keep = (0..norms.len())
            .fold(0, |best, i| if norms[i] > norms[best] { i } else { best });
        removed.retain(|&i| i != keep);
    }
    removed
}

/// Structures of `weight` (GEMM view, first axis = filters) whose L2 norm is
/// strictly below the threshold; at least one filter and one column survive.
pub fn purify_layer(weight: &Tensor, tau_col: f64, tau_filt: f64) -> Removal {
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows;
    Removal {
        filters: below(&filter_norms(weight.data(), rows, cols), tau_filt),
        columns: below(&column_norms(weight.data(), rows, cols), tau_col),
    }
}

/// Consumer columns that read the channels of `removed` filters of layer
/// `layer`. The removed filters must carry zero bias so the channels they
/// produce are identically zero.
pub fn propagate_removal(network: &Network, layer: usize, removed: &[usize]) -> Result<Vec<usize>> {
    if removed.is_empty() {
        return Ok(Vec::new());
    }
    let Some((_, bias)) = network.layers.get(layer).and_then(Layer::params) else {
        return contract_err(format!("layer {layer} has no filters"));
    };
    for &f in removed {
        if bias.data().get(f).copied().unwrap_or(0.0) != 0.0 {
            return contract_err(format!("removed filter {f} of layer {layer} has nonzero bias"));
        }
    }
    let Some(consumer) = network.next_weight_layer(layer) else {
        return contract_err(format!("layer {layer} has no consumer"));
    };
    let chans = column_channels(network, consumer)?;
    Ok((0..chans.len()).filter(|&j| removed.contains(&chans[j])).collect())
}

/// Applies thresholds on top of `masks`: sub-threshold structures of every
/// thresholded layer are masked, removed filters get zero weights and bias,
/// and the removal is propagated into consumer columns. Returns the purified
/// (still dense-shaped) network and its masks.
pub fn purify(network: &Network, masks: &MaskSet, config: &PurifyConfig) -> Result<(Network, MaskSet)> {
    config.validate()?;
    masks.check(network)?;
    for &li in config.thresholds.keys() {
        if network.layers.get(li).and_then(Layer::params).is_none() {
            return contract_err(format!("thresholds for parameterless layer {li}"));
        }
    }
    let mut out_masks = masks.clone();
    // Layer order, propagating as we go, so a consumer never loses its
    // last live column.
    for li in network.weight_layers() {
        propagate_channels(network, &mut out_masks)?;
        let Some(t) = config.thresholds.get(&li) else { continue };
        let (w, _) = network.layers[li].params().expect("checked");
        let m = out_masks.layers.get_mut(&li).expect("checked");
        // Only structures still alive compete; masked ones are already gone.
        let mut masked = w.clone();
        zero_by_mask(&mut masked, m);
        let rows = m.filters.len();
        let cols = m.columns.len();
        let fn_ = filter_norms(masked.data(), rows, cols);
        let cn = column_norms(masked.data(), rows, cols);
        clamp_remove(&mut m.columns, &cn, t.column);
        let before = m.filters.clone();
        clamp_remove(&mut m.filters, &fn_, t.filter);
        if let Some(consumer) = network.next_weight_layer(li) {
            let chans = column_channels(network, consumer)?;
            let cm = &out_masks.layers[&consumer];
            let read: Vec<bool> = (0..rows)
                .map(|f| (0..chans.len()).any(|j| cm.columns[j] && chans[j] == f))
                .collect();
            let m = out_masks.layers.get_mut(&li).expect("checked");
            let still_read = (0..rows).any(|f| m.filters[f] && read[f]);
            let strongest = (0..rows)
                .filter(|&f| before[f] && read[f])
                .fold(None, |best: Option<usize>, f| match best {
                    Some(b) if fn_[b] >= fn_[f] => Some(b),
                    _ => Some(f),
                });
            if let (false, Some(f)) = (still_read, strongest) {
                m.filters[f] = true;
            }
        }
    }
    propagate_channels(network, &mut out_masks)?;
    let mut net = network.clone();
    out_masks.enforce(&mut net)?;
    Ok((net, out_masks))
}

fn zero_by_mask(w: &mut Tensor, m: &crate::schemes::LayerMask) {
    let cols = m.columns.len();
    for (r, row) in w.data_mut().chunks_mut(cols).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            if !(m.filters[r] && m.columns[c]) {
                *v = 0.0;
            }
        }
    }
}

/// Masks alive entries with norm below `tau`, never the last alive one.
fn clamp_remove(alive: &mut [bool], norms: &[f64], tau: f64) {
    let idx: Vec<usize> = (0..alive.len()).filter(|&i| alive[i]).collect();
    let alive_norms: Vec<f64> = idx.iter().map(|&i| norms[i]).collect();
    for k in below(&alive_norms, tau) {
        alive[idx[k]] = false;
    }
}

/// Builds the compact network: masked filters, their consumer channels and
/// masked columns are physically removed. Conv layers that lose only some
/// positions of a channel keep a column index list (GEMM view).
pub fn shrink_network(network: &Network, masks: &MaskSet) -> Result<Network> {
    masks.check(network)?;
    // Consistency: every column reading a removed filter's channel is removed.
    for li in network.weight_layers() {
        let Some(next) = network.next_weight_layer(li) else { continue };
        let chans = column_channels(network, next)?;
        let prod = &masks.layers[&li].filters;
        let cons = &masks.layers[&next].columns;
        if chans.iter().zip(cons).any(|(&c, &keep)| keep && !prod[c]) {
            return contract_err(format!(
                "layer {next} keeps columns fed by removed filters of layer {li}; propagate first"
            ));
        }
    }
    let mut layers = Vec::with_capacity(network.layers.len());
    // Map from old producer channel to new channel index, for the next consumer.
    let mut channel_map: Option<Vec<Option<usize>>> = None;
    for (i, layer) in network.layers.iter().enumerate() {
        match layer {
            Layer::Conv(conv) => {
                let m = &masks.layers[&i];
                let kk = conv.geom.kh * conv.geom.kw;
                let map = channel_map.take().unwrap_or_else(|| (0..conv.geom.cin).map(Some).collect());
                let new_cin = map.iter().flatten().count();
                let kept_rows: Vec<usize> = (0..m.filters.len()).filter(|&r| m.filters[r]).collect();
                let kept_cols: Vec<usize> = (0..m.columns.len()).filter(|&c| m.columns[c]).collect();
                let mut new_index = Vec::with_capacity(kept_cols.len());
                for &j in &kept_cols {
                    let full = conv.geom.column_index(j);
                    let Some(nc) = map[full / kk] else {
                        return contract_err(format!("layer {i}: kept column {j} reads a removed channel"));
                    };
                    new_index.push(nc * kk + full % kk);
                }
                let old_cols = m.columns.len();
                let mut data = Vec::with_capacity(kept_rows.len() * kept_cols.len());
                for &r in &kept_rows {
                    let row = &conv.weight.data()[r * old_cols..(r + 1) * old_cols];
                    data.extend(kept_cols.iter().map(|&c| row[c]));
                }
                let full = new_index.len() == new_cin * kk && new_index.iter().enumerate().all(|(a, &b)| a == b);
                let geom = ConvGeometry {
                    cin: new_cin,
                    kh: conv.geom.kh,
                    kw: conv.geom.kw,
                    stride: conv.geom.stride,
                    pad: conv.geom.pad,
                    columns: (!full).then_some(new_index),
                };
                let shape = if full {
                    vec![kept_rows.len(), new_cin, conv.geom.kh, conv.geom.kw]
                } else {
                    vec![kept_rows.len(), kept_cols.len()]
                };
                let bias = kept_rows.iter().map(|&r| conv.bias.data()[r]).collect();
                layers.push(Layer::Conv(ConvLayer {
                    geom,
                    weight: Tensor::new(shape, data)?,
                    bias: Tensor::new(vec![kept_rows.len()], bias)?,
                }));
                channel_map = Some(renumber(&m.filters));
            }
            Layer::Fc(fc) => {
                let m = &masks.layers[&i];
                let chans = column_channels(network, i)?;
                if let Some(map) = channel_map.take() {
                    // Within a surviving channel every feature must be kept.
                    for (j, &c) in chans.iter().enumerate() {
                        if map[c].is_some() != m.columns[j] {
                            return contract_err(format!(
                                "layer {i}: fc columns can only be removed per producer channel"
                            ));
                        }
                    }
                }
                let kept_rows: Vec<usize> = (0..m.filters.len()).filter(|&r| m.filters[r]).collect();
                let kept_cols: Vec<usize> = (0..m.columns.len()).filter(|&c| m.columns[c]).collect();
                let din = fc.in_dim();
                let mut data = Vec::with_capacity(kept_rows.len() * kept_cols.len());
                for &r in &kept_rows {
                    let row = &fc.weight.data()[r * din..(r + 1) * din];
                    data.extend(kept_cols.iter().map(|&c| row[c]));
                }
                let bias = kept_rows.iter().map(|&r| fc.bias.data()[r]).collect();
                layers.push(Layer::Fc(FcLayer {
                    weight: Tensor::new(vec![kept_rows.len(), kept_cols.len()], data)?,
                    bias: Tensor::new(vec![kept_rows.len()], bias)?,
                }));
                channel_map = Some(renumber(&m.filters));
            }
            other => layers.push(other.clone()),
        }
    }
    let out = Network {
        arch: network.arch.clone(),
        input_shape: network.input_shape,
        classes: network.classes,
        layers,
    };
    if out.classes != network.classes || out.shapes().is_err() {
        return contract_err("shrunk network is inconsistent (classifier rows removed?)");
    }
    out.validate()?;
    Ok(out)
}

fn renumber(keep: &[bool]) -> Vec<Option<usize>> {
    let mut next = 0;
    keep.iter()
        .map(|&k| {
            k.then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Candidate quantile levels for threshold search: 0%, 10%, ..., 50%.
pub const QUANTILE_LEVELS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Threshold that removes the lowest `ceil(q * n)` of the given norms: the
/// midpoint between that cut and the next larger norm (0 for `q = 0`).
pub fn quantile_threshold(norms: &[f64], q: f64) -> f64 {
    if q <= 0.0 || norms.is_empty() {
        return 0.0;
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let r = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len().saturating_sub(1).max(1));
    if r >= sorted.len() {
        return 0.0;
    }
    0.5 * (sorted[r - 1] + sorted[r])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearchConfig {
    /// Allowed accuracy drop (fraction) relative to the pre-purification accuracy.
    pub epsilon: f64,
    pub objective: Objective,
    pub sa: SaConfig,
}

impl Default for ThresholdSearchConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.002,
            objective: Objective::Params,
            sa: SaConfig {
                iters_per_temp: 6,
                t_stop_ratio: 0.1,
                ..SaConfig::default()
            },
        }
    }
}

struct ThresholdProblem<'a> {
    network: &'a Network,
    masks: &'a MaskSet,
    held_out: &'a Dataset,
    layers: Vec<usize>,
    /// Per layer: (column thresholds, filter thresholds) per quantile level.
    candidates: Vec<(Vec<f64>, Vec<f64>)>,
    base_accuracy: f64,
    base_count: f64,
    epsilon: f64,
    objective: Objective,
}

/// Quantile level index per layer: `(column, filter)`.
type Levels = Vec<(usize, usize)>;

impl ThresholdProblem<'_> {
    fn config(&self, levels: &Levels) -> PurifyConfig {
        PurifyConfig {
            thresholds: self
                .layers
                .iter()
                .zip(levels)
                .zip(&self.candidates)
                .map(|((&li, &(qc, qf)), (cc, cf))| (li, Thresholds { column: cc[qc], filter: cf[qf] }))
                .collect(),
        }
    }

    /// `(accuracy, reduction)` of a candidate.
    fn measure(&self, levels: &Levels) -> Result<(f64, f64)> {
        let (net, masks) = purify(self.network, self.masks, &self.config(levels))?;
        let acc = evaluate_accuracy(&net, self.held_out)?;
        let count = objective_count(&net, Some(&masks), self.objective)?;
        Ok((acc, self.base_count / count.max(1.0)))
    }
}

impl AnnealProblem for ThresholdProblem<'_> {
    type State = Levels;

    fn perturb(&self, state: &Levels, t: f64, t0: f64, rng: &mut ChaCha8Rng) -> Result<Levels> {
        let mut out = state.clone();
        let n = out.len();
        let span = ((QUANTILE_LEVELS.len() - 1) as f64 * (t / t0).clamp(0.0, 1.0)).ceil().max(1.0) as i64;
        for _ in 0..n.div_ceil(3).max(1) {
            let i = rng.gen_range(0..n);
            let step = rng.gen_range(-span..=span);
            let max = (QUANTILE_LEVELS.len() - 1) as i64;
            if rng.gen_bool(0.5) {
                out[i].0 = (out[i].0 as i64 + step).clamp(0, max) as usize;
            } else {
                out[i].1 = (out[i].1 as i64 + step).clamp(0, max) as usize;
            }
        }
        Ok(out)
    }

    /// Negative reduction when the accuracy constraint holds, otherwise a
    /// penalty growing with the violation.
    fn energy(&self, state: &Levels) -> Result<f64> {
        let (acc, reduction) = self.measure(state)?;
        let drop = self.base_accuracy - acc;
        Ok(if drop <= self.epsilon + 1e-12 {
            -reduction
        } else {
            1.0 + drop
        })
    }

    fn digest(&self, state: &Levels) -> String {
        state.iter().map(|(c, f)| format!("{c}{f}")).collect()
    }
}

/// Searches per-layer thresholds maximizing the extra reduction while the
/// held-out accuracy stays within `epsilon` of its pre-purification value.
/// Always returns a configuration satisfying that constraint (all-zero
/// thresholds if nothing better is found).
pub fn search_thresholds(
    network: &Network,
    masks: &MaskSet,
    held_out: &Dataset,
    config: &ThresholdSearchConfig,
) -> Result<PurifyConfig> {
    let layers = network.prunable_layers();
    let mut candidates = Vec::with_capacity(layers.len());
    for &li in &layers {
        let (w, _) = network.layers[li].params().expect("prunable");
        let m = &masks.layers[&li];
        let mut masked = w.clone();
        zero_by_mask(&mut masked, m);
        let (rows, cols) = (m.filters.len(), m.columns.len());
        let fn_: Vec<f64> = filter_norms(masked.data(), rows, cols)
            .into_iter()
            .zip(&m.filters)
            .filter(|(_, &k)| k)
            .map(|(n, _)| n)
            .collect();
        let cn: Vec<f64> = column_norms(masked.data(), rows, cols)
            .into_iter()
            .zip(&m.columns)
            .filter(|(_, &k)| k)
            .map(|(n, _)| n)
            .collect();
        candidates.push((
            QUANTILE_LEVELS.iter().map(|&q| quantile_threshold(&cn, q)).collect(),
            QUANTILE_LEVELS.iter().map(|&q| quantile_threshold(&fn_, q)).collect(),
        ));
    }
    // Accuracy of the starting point: purified with zero thresholds, which
    // only zeroes biases of already-masked filters.
    let (start_net, _) = purify(network, masks, &PurifyConfig::default())?;
    let problem = ThresholdProblem {
        network,
        masks,
        held_out,
        base_accuracy: evaluate_accuracy(&start_net, held_out)?,
        base_count: objective_count(network, Some(masks), config.objective)?,
        layers,
        candidates,
        epsilon: config.epsilon,
        objective: config.objective,
    };
    let initial: Levels = vec![(0, 0); problem.layers.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.sa.seed);
    let out = anneal(&problem, initial.clone(), &config.sa, &mut rng)?;
    let best = if out.best_energy < out.initial_energy { out.best } else { initial };
    Ok(problem.config(&best))
}
