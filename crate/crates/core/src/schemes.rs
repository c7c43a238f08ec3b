//! Filter / channel / column structure groupings over weight matrices in
//! their GEMM view, structure masks, and params/FLOPs accounting.
//!
//! A conv weight `Cout x Cin x kh x kw` is viewed as a `Cout x (Cin*kh*kw)`
//! matrix: a filter is a row, a column is one `(c, ky, kx)` position shared
//! by all filters, and a channel is the `kh*kw` block of columns reading one
//! input channel. FC weights are the `Cout x Cin x 1 x 1` special case.

use std::collections::BTreeMap;

use crate::error::{contract_err, shape_err, Result};
use crate::model::{ActShape, Layer, Network};
use crate::sa::Action;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Filter,
    Channel,
    Column,
}

/// Kept filters (rows) and columns of one weight layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub filters: Vec<bool>,
    pub columns: Vec<bool>,
}

impl LayerMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            filters: vec![true; rows],
            columns: vec![true; cols],
        }
    }

    pub fn kept_filters(&self) -> usize {
        self.filters.iter().filter(|&&k| k).count()
    }

    pub fn kept_columns(&self) -> usize {
        self.columns.iter().filter(|&&k| k).count()
    }

    pub fn kept_weights(&self) -> usize {
        self.kept_filters() * self.kept_columns()
    }

    /// Row-major dense boolean over the GEMM matrix: `filters[i] && columns[j]`.
    pub fn dense(&self) -> Vec<bool> {
        self.filters
            .iter()
            .flat_map(|&f| self.columns.iter().map(move |&c| f && c))
            .collect()
    }
}

/// Structure masks for every parameterized layer, keyed by layer index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSet {
    pub layers: BTreeMap<usize, LayerMask>,
}

/// Per-layer keep counts realizing a structure constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructureConstraint {
    pub keep_filters: usize,
    pub keep_columns: usize,
}

impl MaskSet {
    /// All-ones masks for `network`.
    pub fn dense(network: &Network) -> Self {
        let layers = network
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.gemm_dims().map(|(r, c)| (i, LayerMask::all(r, c))))
            .collect();
        Self { layers }
    }

    pub fn get(&self, layer: usize) -> Option<&LayerMask> {
        self.layers.get(&layer)
    }

    pub fn check(&self, network: &Network) -> Result<()> {
        for (i, layer) in network.layers.iter().enumerate() {
            match (layer.gemm_dims(), self.layers.get(&i)) {
                (Some((r, c)), Some(m)) => {
                    if m.filters.len() != r || m.columns.len() != c {
                        return shape_err(format!(
                            "mask for layer {i} is {}x{}, weights are {r}x{c}",
                            m.filters.len(),
                            m.columns.len()
                        ));
                    }
                }
                (Some(_), None) => return shape_err(format!("no mask for layer {i}")),
                (None, Some(_)) => return shape_err(format!("mask for parameterless layer {i}")),
                (None, None) => {}
            }
        }
        if self.layers.keys().any(|&k| k >= network.layers.len()) {
            return shape_err("mask refers to a layer beyond the network");
        }
        Ok(())
    }

    /// Zeroes masked weights in place. Biases are left untouched.
    pub fn zero_weights(&self, network: &mut Network) -> Result<()> {
        self.check(network)?;
        for (&i, m) in &self.layers {
            let (w, _) = network.layers[i].params_mut().expect("checked");
            zero_masked(w, m);
        }
        Ok(())
    }

    /// Zeroes masked weights and the biases of masked filters; used while
    /// training under a fixed structure so pruned filters stay fully removed.
    pub fn enforce(&self, network: &mut Network) -> Result<()> {
        self.check(network)?;
        for (&i, m) in &self.layers {
            let (w, b) = network.layers[i].params_mut().expect("checked");
            zero_masked(w, m);
            for (v, &keep) in b.data_mut().iter_mut().zip(&m.filters) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Intersection of two mask sets over the same network.
    pub fn and(&self, other: &MaskSet) -> Result<MaskSet> {
        if self.layers.keys().ne(other.layers.keys()) {
            return contract_err("mask sets cover different layers");
        }
        let layers = self
            .layers
            .iter()
            .map(|(&i, a)| {
                let b = &other.layers[&i];
                (
                    i,
                    LayerMask {
                        filters: a.filters.iter().zip(&b.filters).map(|(x, y)| *x && *y).collect(),
                        columns: a.columns.iter().zip(&b.columns).map(|(x, y)| *x && *y).collect(),
                    },
                )
            })
            .collect();
        Ok(MaskSet { layers })
    }
}

fn zero_masked(w: &mut Tensor, m: &LayerMask) {
    let cols = m.columns.len();
    for (r, row) in w.data_mut().chunks_mut(cols).enumerate() {
        if !m.filters[r] {
            row.fill(0.0);
            continue;
        }
        for (v, &keep) in row.iter_mut().zip(&m.columns) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Copy of `network` with masked weights set to exactly zero.
pub fn apply_mask(network: &Network, masks: &MaskSet) -> Result<Network> {
    let mut out = network.clone();
    masks.zero_weights(&mut out)?;
    Ok(out)
}

/// `(rows, cols, kh*kw)` of a conv (rank 4) or fc (rank 2) weight.
fn gemm_view(weight: &Tensor) -> Result<(usize, usize, usize)> {
    match *weight.shape() {
        [r, c, kh, kw] => Ok((r, c * kh * kw, kh * kw)),
        [r, c] => Ok((r, c, 1)),
        ref s => shape_err(format!("weight must be rank 2 or 4, got {s:?}")),
    }
}

/// L2 norm of every structure of the given scheme.
pub fn group_norms(weight: &Tensor, scheme: Scheme) -> Result<Vec<f64>> {
    let (rows, cols, kk) = gemm_view(weight)?;
    Ok(match scheme {
        Scheme::Filter => filter_norms(weight.data(), rows, cols),
        Scheme::Column => column_norms(weight.data(), rows, cols),
        Scheme::Channel => {
            let sq = column_sq_norms(weight.data(), rows, cols);
            sq.chunks(kk).map(|c| c.iter().sum::<f64>().sqrt()).collect()
        }
    })
}

pub(crate) fn filter_norms(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(data.len(), rows * cols);
    data.chunks(cols)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn column_sq_norms(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut sq = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in sq.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *acc += v * v;
        }
    }
    sq
}

pub(crate) fn column_norms(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    column_sq_norms(data, rows, cols).into_iter().map(f64::sqrt).collect()
}

/// Column norms of the matrix with unkept rows zeroed.
pub(crate) fn kept_row_column_norms(data: &[f64], rows_kept: &[bool], cols: usize) -> Vec<f64> {
    let mut sq = vec![0.0; cols];
    for (r, row) in data.chunks(cols).enumerate() {
        if !rows_kept[r] {
            continue;
        }
        for (acc, v) in sq.iter_mut().zip(row) {
            *acc += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Keeps the `k` largest-norm candidates (`alive[i]`), ties to the lower index.
pub fn top_k(norms: &[f64], alive: &[bool], k: usize) -> Vec<bool> {
    let mut candidates: Vec<usize> = (0..norms.len()).filter(|&i| alive[i]).collect();
    candidates.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut keep = vec![false; norms.len()];
    for &i in candidates.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// `floor(x + 0.5)`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Keep count for `alive` structures pruned at `rate`, clamped to `[1, alive]`.
pub fn keep_count(alive: usize, rate: f64) -> usize {
    if alive == 0 {
        return 0;
    }
    round_half_up(alive as f64 / rate.max(1.0)).clamp(1, alive)
}

/// For each GEMM column of layer `consumer`, the producer channel it reads
/// (the output filter index of the previous parameterized layer).
pub fn column_channels(network: &Network, consumer: usize) -> Result<Vec<usize>> {
    let shapes = network.shapes()?;
    match &network.layers[consumer] {
        Layer::Conv(conv) => Ok((0..conv.geom.gemm_columns()).map(|j| conv.geom.column_channel(j)).collect()),
        Layer::Fc(fc) => {
            // Walk back to the flatten (if any) to find the spatial block size.
            let mut block = 1;
            for j in (0..consumer).rev() {
                match &network.layers[j] {
                    Layer::Flatten => {
                        if let ActShape::Map { h, w, .. } = shapes[j] {
                            block = h * w;
                        }
                        break;
                    }
                    Layer::Fc(_) | Layer::Conv(_) => break,
                    _ => {}
                }
            }
            Ok((0..fc.in_dim()).map(|j| j / block).collect())
        }
        other => contract_err(format!("layer {consumer} ({}) has no columns", other.kind())),
    }
}

/// Kills the consumer columns fed by every masked filter, layer by layer.
pub fn propagate_channels(network: &Network, masks: &mut MaskSet) -> Result<()> {
    masks.check(network)?;
    for consumer in network.weight_layers() {
        kill_dead_inputs(network, masks, consumer)?;
    }
    Ok(())
}

/// Masks the columns of `consumer` that read a channel whose producer filter
/// is masked.
fn kill_dead_inputs(network: &Network, masks: &mut MaskSet, consumer: usize) -> Result<()> {
    let Some(producer) = (0..consumer).rev().find(|&p| network.layers[p].params().is_some()) else {
        return Ok(());
    };
    let dead: Vec<bool> = masks.layers[&producer].filters.iter().map(|k| !k).collect();
    if !dead.iter().any(|&d| d) {
        return Ok(());
    }
    let chans = column_channels(network, consumer)?;
    let cm = masks.layers.get_mut(&consumer).expect("mask for every weight layer");
    for (keep, &ch) in cm.columns.iter_mut().zip(&chans) {
        if dead[ch] {
            *keep = false;
        }
    }
    Ok(())
}

/// Conv-weight and total-weight counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub conv: usize,
    pub total: usize,
}

/// Conv and total forward-pass FLOPs (2 per multiply-accumulate).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub conv: u64,
    pub total: u64,
}

/// Unmasked weight entries; biases are not counted.
pub fn count_params(network: &Network, masks: Option<&MaskSet>) -> Result<ParamCount> {
    if let Some(m) = masks {
        m.check(network)?;
    }
    let mut count = ParamCount { conv: 0, total: 0 };
    for (i, layer) in network.layers.iter().enumerate() {
        let Some((rows, cols)) = layer.gemm_dims() else { continue };
        let kept = masks.map_or(rows * cols, |m| m.layers[&i].kept_weights());
        count.total += kept;
        if matches!(layer, Layer::Conv(_)) {
            count.conv += kept;
        }
    }
    Ok(count)
}

pub fn count_flops(network: &Network, masks: Option<&MaskSet>) -> Result<FlopCount> {
    if let Some(m) = masks {
        m.check(network)?;
    }
    let shapes = network.shapes()?;
    let mut count = FlopCount { conv: 0, total: 0 };
    for (i, layer) in network.layers.iter().enumerate() {
        let Some((rows, cols)) = layer.gemm_dims() else { continue };
        let kept = masks.map_or(rows * cols, |m| m.layers[&i].kept_weights()) as u64;
        match (layer, shapes[i + 1]) {
            (Layer::Conv(_), ActShape::Map { h, w, .. }) => {
                let f = 2 * kept * (h * w) as u64;
                count.conv += f;
                count.total += f;
            }
            _ => count.total += 2 * kept,
        }
    }
    Ok(count)
}

/// Which quantity a pruning rate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Params,
    Flops,
}

impl std::str::FromStr for Objective {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "params" => Ok(Objective::Params),
            "flops" => Ok(Objective::Flops),
            other => Err(crate::Error::Config(format!("objective must be params or flops, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Params => "params",
            Objective::Flops => "flops",
        })
    }
}

/// Conv params or conv FLOPs under `masks`.
pub fn objective_count(network: &Network, masks: Option<&MaskSet>, objective: Objective) -> Result<f64> {
    Ok(match objective {
        Objective::Params => count_params(network, masks)?.conv as f64,
        Objective::Flops => count_flops(network, masks)?.conv as f64,
    })
}

/// Chooses structures layer by layer: for each prunable layer, the
/// top-`keep_filters` rows of `scores` among rows alive in `base`, then the
/// top-`keep_columns` columns among columns alive in `base` whose input
/// channel survived the previous layer's choice. Finishes with channel
/// propagation into non-prunable consumers.
///
/// `scores(layer)` supplies the matrix whose structure norms rank the
/// candidates (the weights for magnitude pruning, `W + U` for projection).
pub fn select_structures<'a>(
    network: &Network,
    scores: impl Fn(usize) -> &'a Tensor,
    constraints: &BTreeMap<usize, StructureConstraint>,
    base: &MaskSet,
) -> Result<MaskSet> {
    base.check(network)?;
    let mut out = base.clone();
    for li in network.weight_layers() {
        kill_dead_inputs(network, &mut out, li)?;
        let Some(c) = constraints.get(&li) else { continue };
        let (rows, cols) = network.layers[li].gemm_dims().expect("weight layer");
        let w = scores(li);
        if w.numel() != rows * cols {
            return shape_err(format!("score tensor for layer {li} has wrong size"));
        }
        let m = out.layers.get_mut(&li).expect("checked");
        let fnorms = filter_norms(w.data(), rows, cols);
        let k_f = c.keep_filters.clamp(1, m.kept_filters().max(1));
        m.filters = top_k(&fnorms, &m.filters, k_f);
        let cnorms = kept_row_column_norms(w.data(), &m.filters, cols);
        let k_c = c.keep_columns.clamp(1, m.kept_columns().max(1));
        m.columns = top_k(&cnorms, &m.columns, k_c);
    }
    Ok(out)
}

/// Keep counts realizing `action` on top of `base`: filter rate
/// `rate^split`, column rate `rate^(1-split)`, each rounded half-up and
/// clamped to at least one structure. Column counts are relative to the
/// columns still alive after the previous layer's filter choice, which is
/// made by magnitude on the current weights.
pub fn realize_constraints(
    network: &Network,
    action: &Action,
    base: &MaskSet,
) -> Result<BTreeMap<usize, StructureConstraint>> {
    base.check(network)?;
    let mut constraints = BTreeMap::new();
    let mut masks = base.clone();
    for la in &action.layers {
        let li = la.layer;
        if !matches!(network.layers.get(li), Some(Layer::Conv(_))) {
            return contract_err(format!("action refers to non-prunable layer {li}"));
        }
    }
    for li in network.weight_layers() {
        kill_dead_inputs(network, &mut masks, li)?;
        let Some(la) = action.layers.iter().find(|a| a.layer == li) else { continue };
        let m = masks.layers.get_mut(&li).expect("checked");
        let (filter_rate, column_rate) = la.scheme_rates();
        let c = StructureConstraint {
            keep_filters: keep_count(m.kept_filters(), filter_rate),
            keep_columns: keep_count(m.kept_columns(), column_rate),
        };
        let (rows, cols) = network.layers[li].gemm_dims().expect("weight layer");
        let (w, _) = network.layers[li].params().expect("weight layer");
        m.filters = top_k(&filter_norms(w.data(), rows, cols), &m.filters, c.keep_filters);
        m.columns = top_k(&kept_row_column_norms(w.data(), &m.filters, cols), &m.columns, c.keep_columns);
        constraints.insert(li, c);
    }
    Ok(constraints)
}

/// Magnitude-based structured pruning: per layer, keep the largest-L2
/// filters and columns in the counts the action asks for.
pub fn magnitude_prune(network: &Network, action: &Action, base: &MaskSet) -> Result<MaskSet> {
    let constraints = realize_constraints(network, action, base)?;
    select_structures(
        network,
        |li| network.layers[li].params().expect("weight layer").0,
        &constraints,
        base,
    )
}
