//! ADMM-regularized structured pruning.
//!
//! Alternates (1) Adam training of `f(W) + sum_i rho_i/2 ||W_i - Z_i + U_i||^2`,
//! (2) projection `Z_i = proj_{S_i}(W_i + U_i)`, and (3) the scaled dual
//! update `U_i += W_i - Z_i`, with the penalties growing on a fixed schedule.
//! Afterwards the support of `Z` becomes a hard mask and the network is
//! retrained under it.

use std::collections::BTreeMap;

use crate::error::{contract_err, Error, Result};
use crate::model::{evaluate_accuracy, evaluate_loss, train_with, Dataset, Network, ProximalPenalty, TrainConfig};
use crate::sa::Action;
use crate::schemes::{
    filter_norms, kept_row_column_norms, realize_constraints, select_structures, top_k, MaskSet,
    StructureConstraint,
};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub rho0: f64,
    pub rho_growth: f64,
    pub rho_period: usize,
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    pub retrain_epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho0: 1e-4,
            rho_growth: 1.5,
            rho_period: 3,
            iterations: 9,
            epochs_per_iteration: 4,
            retrain_epochs: 8,
            lr: 1e-3,
            batch: 32,
            seed: 0,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho0 < 0.0
            || !self.rho0.is_finite()
            || self.rho_growth < 1.0
            || self.rho_period == 0
            || self.iterations == 0
            || self.epochs_per_iteration == 0
            || self.batch == 0
        {
            return Err(Error::Config(format!("invalid ADMM config {self:?}")));
        }
        Ok(())
    }
}

/// Auxiliary, dual and penalty variables of every constrained layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub z: BTreeMap<usize, Tensor>,
    pub u: BTreeMap<usize, Tensor>,
    pub rho: BTreeMap<usize, f64>,
    pub constraints: BTreeMap<usize, StructureConstraint>,
    /// Structure support of the latest `Z`, including inherited masks.
    pub support: MaskSet,
    /// Masks inherited from earlier rounds, enforced throughout.
    pub base: MaskSet,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmIteration {
    pub iteration: usize,
    /// Mean data loss over the last epoch of this iteration.
    pub loss: f64,
    /// `(layer, ||W - Z||_F, ||W - Z||_F / ||W||_F)`.
    pub residuals: Vec<(usize, f64, f64)>,
    pub rho: f64,
}

impl AdmmIteration {
    pub fn mean_relative_residual(&self) -> f64 {
        if self.residuals.is_empty() {
            return 0.0;
        }
        self.residuals.iter().map(|r| r.2).sum::<f64>() / self.residuals.len() as f64
    }
}

/// Projection of one weight matrix onto "at most `keep_filters` nonzero rows
/// and `keep_columns` nonzero columns": top rows by L2 norm, then top columns
/// of the row-projected matrix. Ties go to the lower index.
pub fn euclidean_project(weight: &Tensor, constraint: StructureConstraint) -> Result<Tensor> {
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows;
    if constraint.keep_filters > rows || constraint.keep_columns > cols {
        return contract_err(format!(
            "constraint keeps {}x{} of a {rows}x{cols} matrix",
            constraint.keep_filters, constraint.keep_columns
        ));
    }
    let filters = top_k(&filter_norms(weight.data(), rows, cols), &vec![true; rows], constraint.keep_filters);
    let columns = top_k(&kept_row_column_norms(weight.data(), &filters, cols), &vec![true; cols], constraint.keep_columns);
    let mut z = weight.clone();
    for (r, row) in z.data_mut().chunks_mut(cols).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            if !(filters[r] && columns[c]) {
                *v = 0.0;
            }
        }
    }
    Ok(z)
}

/// `U + W - Z`.
pub fn dual_update(u: &Tensor, w: &Tensor, z: &Tensor) -> Result<Tensor> {
    let mut out = u.zip_map(w, |a, b| a + b)?;
    for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
        *o -= zv;
    }
    if out.shape() != z.shape() {
        return contract_err("dual update shapes differ");
    }
    Ok(out)
}

/// Penalty after iteration `k`: multiplied by the growth factor on every
/// `period`-th iteration.
pub fn multi_rho_update(rho: f64, k: usize, config: &AdmmConfig) -> f64 {
    if k > 0 && k % config.rho_period == 0 {
        rho * config.rho_growth
    } else {
        rho
    }
}

fn weight(network: &Network, layer: usize) -> &Tensor {
    network.layers[layer].params().expect("constrained layer has weights").0
}

/// Joint projection of all layers from the given score tensors; returns the
/// new `Z` tensors and their support.
fn project_all(
    network: &Network,
    scores: &BTreeMap<usize, Tensor>,
    constraints: &BTreeMap<usize, StructureConstraint>,
    base: &MaskSet,
) -> Result<(BTreeMap<usize, Tensor>, MaskSet)> {
    let support = select_structures(
        network,
        |li| scores.get(&li).unwrap_or_else(|| weight(network, li)),
        constraints,
        base,
    )?;
    let mut z = BTreeMap::new();
    for (&li, s) in scores {
        let mut t = s.clone();
        let m = &support.layers[&li];
        let cols = m.columns.len();
        for (r, row) in t.data_mut().chunks_mut(cols).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                if !(m.filters[r] && m.columns[c]) {
                    *v = 0.0;
                }
            }
        }
        z.insert(li, t);
    }
    Ok((z, support))
}

/// `Z^0 = proj(W^0)`, `U^0 = 0`, `rho = rho0`.
pub fn init_state(network: &Network, action: &Action, base: &MaskSet, config: &AdmmConfig) -> Result<AdmmState> {
    let constraints = realize_constraints(network, action, base)?;
    let scores: BTreeMap<usize, Tensor> = constraints
        .keys()
        .map(|&li| (li, weight(network, li).clone()))
        .collect();
    let (z, support) = project_all(network, &scores, &constraints, base)?;
    let u = z.iter().map(|(&li, t)| (li, Tensor::zeros(t.shape()))).collect();
    let rho = constraints.keys().map(|&li| (li, config.rho0)).collect();
    Ok(AdmmState {
        z,
        u,
        rho,
        constraints,
        support,
        base: base.clone(),
        iteration: 0,
    })
}

fn residuals(network: &Network, state: &AdmmState) -> Vec<(usize, f64, f64)> {
    state
        .z
        .iter()
        .map(|(&li, z)| {
            let w = weight(network, li);
            let d = w.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let n = w.frobenius();
            (li, d, if n > 0.0 { d / n } else { 0.0 })
        })
        .collect()
}

/// Data loss plus `sum_i rho_i/2 ||W_i - Z_i + U_i||^2` over `data`.
pub fn augmented_objective(network: &Network, data: &Dataset, state: &AdmmState) -> Result<f64> {
    let mut total = evaluate_loss(network, data)?;
    for (&li, z) in &state.z {
        let w = weight(network, li);
        let u = &state.u[&li];
        let sq: f64 = w
            .data()
            .iter()
            .zip(z.data())
            .zip(u.data())
            .map(|((a, b), c)| (a - b + c).powi(2))
            .sum();
        total += 0.5 * state.rho[&li] * sq;
    }
    Ok(total)
}

/// One ADMM iteration: regularized training, projection, dual update, rho schedule.
pub fn admm_iteration(
    network: &mut Network,
    data: &Dataset,
    state: &mut AdmmState,
    config: &AdmmConfig,
) -> Result<AdmmIteration> {
    let k = state.iteration + 1;
    let penalty = ProximalPenalty {
        terms: state
            .z
            .iter()
            .map(|(&li, z)| {
                let target = z.zip_map(&state.u[&li], |a, b| a - b).expect("same shape");
                (li, target, state.rho[&li])
            })
            .collect(),
    };
    let train_cfg = TrainConfig {
        epochs: config.epochs_per_iteration,
        lr: config.lr,
        batch: config.batch,
        seed: derive_seed(config.seed, k as u64),
    };
    let stats = train_with(network, data, &train_cfg, Some(&penalty), Some(&state.base)).map_err(|e| match e {
        Error::Training { message, .. } => Error::Training {
            iteration: Some(k),
            message,
        },
        other => other,
    })?;
    let scores: BTreeMap<usize, Tensor> = state
        .u
        .iter()
        .map(|(&li, u)| (li, weight(network, li).zip_map(u, |a, b| a + b).expect("same shape")))
        .collect();
    let (z, support) = project_all(network, &scores, &state.constraints, &state.base)?;
    for (&li, zt) in &z {
        let u_new = dual_update(&state.u[&li], weight(network, li), zt)?;
        state.u.insert(li, u_new);
    }
    state.z = z;
    state.support = support;
    state.iteration = k;
    let res = residuals(network, state);
    let rho_used = state.rho.values().copied().next().unwrap_or(config.rho0);
    for r in state.rho.values_mut() {
        *r = multi_rho_update(*r, k, config);
    }
    Ok(AdmmIteration {
        iteration: k,
        loss: stats.last().map_or(f64::NAN, |s| s.loss),
        residuals: res,
        rho: rho_used,
    })
}

/// Runs the full ADMM regularization for `config.iterations` iterations.
pub fn admm_regularize(
    network: &mut Network,
    action: &Action,
    base: &MaskSet,
    data: &Dataset,
    config: &AdmmConfig,
) -> Result<(AdmmState, Vec<AdmmIteration>)> {
    config.validate()?;
    let mut state = init_state(network, action, base, config)?;
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        history.push(admm_iteration(network, data, &mut state, config)?);
    }
    Ok((state, history))
}

/// Hard-prunes to the support of `Z` and retrains with the masks enforced
/// after every step. Returns the final masks and held-out accuracy.
pub fn hard_prune_retrain(
    network: &mut Network,
    state: &AdmmState,
    data: &Dataset,
    held_out: &Dataset,
    config: &AdmmConfig,
) -> Result<(MaskSet, f64)> {
    let masks = state.support.clone();
    masks.enforce(network)?;
    if config.retrain_epochs > 0 {
        let cfg = TrainConfig {
            epochs: config.retrain_epochs,
            lr: config.lr,
            batch: config.batch,
            seed: derive_seed(config.seed, 0xfeed),
        };
        train_with(network, data, &cfg, None, Some(&masks))?;
    }
    let acc = evaluate_accuracy(network, held_out)?;
    Ok((masks, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn keep_all_is_identity() {
        let w = random_matrix(4, 6, 1);
        let z = euclidean_project(&w, StructureConstraint { keep_filters: 4, keep_columns: 6 }).unwrap();
        assert_eq!(z, w);
    }

    #[test]
    fn column_projection_drops_smallest() {
        // Column norms [5, 1, 3].
        let w = Tensor::new(vec![2, 3], vec![3.0, 1.0, 0.0, 4.0, 0.0, 3.0]).unwrap();
        let z = euclidean_project(&w, StructureConstraint { keep_filters: 2, keep_columns: 2 }).unwrap();
        assert_eq!(z.data(), &[3.0, 0.0, 0.0, 4.0, 0.0, 3.0]);
    }

    #[test]
    fn over_keep_is_contract_error() {
        let w = random_matrix(3, 3, 2);
        assert!(euclidean_project(&w, StructureConstraint { keep_filters: 4, keep_columns: 1 }).is_err());
    }

    #[test]
    fn projection_idempotent() {
        let w = random_matrix(6, 10, 3);
        let c = StructureConstraint { keep_filters: 3, keep_columns: 4 };
        let z = euclidean_project(&w, c).unwrap();
        assert_eq!(euclidean_project(&z, c).unwrap(), z);
    }

    #[test]
    fn dual_update_cases() {
        let u = random_matrix(2, 2, 4);
        let w = random_matrix(2, 2, 5);
        assert_eq!(dual_update(&u, &w, &w).unwrap(), u);
        let z = random_matrix(2, 2, 6);
        let zero = Tensor::zeros(&[2, 2]);
        let d = w.zip_map(&z, |a, b| a - b).unwrap();
        let once = dual_update(&zero, &w, &z).unwrap();
        assert!(once.max_abs_diff(&d) < 1e-15);
        let twice = dual_update(&once, &w, &z).unwrap();
        assert!(twice.max_abs_diff(&d.scale(2.0)) < 1e-15);
    }

    #[test]
    fn rho_schedule() {
        let cfg = AdmmConfig::default();
        let mut rho = cfg.rho0;
        let mut seq = Vec::new();
        for k in 1..=9 {
            rho = multi_rho_update(rho, k, &cfg);
            seq.push(rho);
        }
        assert!((seq[2] - 1.5e-4).abs() < 1e-18);
        assert_eq!(seq[0], 1e-4);
        assert_eq!(seq[3], seq[2]);
        assert!(seq.windows(2).all(|w| w[1] >= w[0]));
    }
}
