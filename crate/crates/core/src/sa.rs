//! Simulated-annealing hyperparameter search over per-layer pruning actions.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{evaluate_accuracy, Dataset, Network};
use crate::schemes::{apply_mask, magnitude_prune, objective_count, count_flops, count_params, MaskSet, Objective};

/// Pruning rate and scheme split of one prunable layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerAction {
    pub layer: usize,
    /// Dense-over-kept ratio requested for this layer, `>= 1`.
    pub rate: f64,
    /// Fraction of `ln(rate)` spent on filter pruning; the rest goes to columns.
    pub split: f64,
}

impl LayerAction {
    /// `(filter rate, column rate)` whose product is `rate`.
    pub fn scheme_rates(&self) -> (f64, f64) {
        let ln = self.rate.max(1.0).ln();
        ((ln * self.split).exp(), (ln * (1.0 - self.split)).exp())
    }
}

/// One full hyperparameter assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub layers: Vec<LayerAction>,
}

impl Action {
    /// Identity action (rate 1 everywhere) for the prunable layers of `network`.
    pub fn identity(network: &Network) -> Self {
        Self {
            layers: network
                .prunable_layers()
                .into_iter()
                .map(|layer| LayerAction { layer, rate: 1.0, split: 0.5 })
                .collect(),
        }
    }

    /// Short stable hash of the exact rate/split bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update((l.layer as u64).to_le_bytes());
            h.update(l.rate.to_bits().to_le_bytes());
            h.update(l.split.to_bits().to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which structure schemes an action may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeMode {
    /// Filter and column pruning mixed per layer.
    Combined,
    FilterOnly,
    ColumnOnly,
}

impl SchemeMode {
    fn fixed_split(self) -> Option<f64> {
        match self {
            SchemeMode::Combined => None,
            SchemeMode::FilterOnly => Some(1.0),
            SchemeMode::ColumnOnly => Some(0.0),
        }
    }
}

impl std::str::FromStr for SchemeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(SchemeMode::Combined),
            "filter" => Ok(SchemeMode::FilterOnly),
            "column" => Ok(SchemeMode::ColumnOnly),
            other => Err(Error::Config(format!("scheme must be combined, filter or column, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaConfig {
    /// Initial temperature; `None` calibrates it from warm-up perturbations.
    pub t0: Option<f64>,
    /// Annealing stops once `T <= t_stop_ratio * T0`.
    pub t_stop_ratio: f64,
    pub cooling: f64,
    pub boltzmann_k: f64,
    pub iters_per_temp: usize,
    pub delta_max: f64,
    pub warmup: usize,
    /// Target initial acceptance probability for the median bad move.
    pub warmup_accept: f64,
    pub seed: u64,
    pub objective: Objective,
    pub scheme: SchemeMode,
    /// Accepted realized rate as `(low, high)` multiples of the round target.
    pub target_band: (f64, f64),
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            t0: None,
            t_stop_ratio: 0.05,
            cooling: 0.7,
            boltzmann_k: 1e-3,
            iters_per_temp: 10,
            delta_max: 0.3,
            warmup: 20,
            warmup_accept: 0.9,
            seed: 0,
            objective: Objective::Params,
            scheme: SchemeMode::Combined,
            target_band: (0.9, 1.1),
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cooling > 0.0
            && self.cooling < 1.0
            && self.t_stop_ratio > 0.0
            && self.t_stop_ratio < 1.0
            && self.boltzmann_k > 0.0
            && self.iters_per_temp > 0
            && self.target_band.0 > 0.0
            && self.target_band.0 <= 1.0
            && self.target_band.1 >= 1.0
            && self.t0.map_or(true, |t| t > 0.0 && t.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SA config {self:?}")))
        }
    }
}

/// `exp(-dE / (k T))` for a worse move, 1 otherwise.
pub fn acceptance_probability(delta_e: f64, k: f64, t: f64) -> f64 {
    if delta_e <= 0.0 {
        1.0
    } else {
        (-delta_e / (k * t)).exp()
    }
}

/// Metropolis acceptance draw.
pub fn accept_move(delta_e: f64, k: f64, t: f64, rng: &mut impl Rng) -> bool {
    delta_e <= 0.0 || rng.gen::<f64>() < acceptance_probability(delta_e, k, t)
}

/// A state space for the annealer. Lower energy is better.
pub trait AnnealProblem {
    type State: Clone;
    fn perturb(&self, state: &Self::State, t: f64, t0: f64, rng: &mut ChaCha8Rng) -> Result<Self::State>;
    fn energy(&self, state: &Self::State) -> Result<f64>;
    fn digest(&self, state: &Self::State) -> String;
}

/// One annealing step as recorded in a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealStep<S> {
    pub temperature: f64,
    pub temperature_index: usize,
    pub candidate: S,
    pub digest: String,
    pub candidate_energy: f64,
    pub current_energy: f64,
    pub best_energy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct AnnealOutcome<S> {
    pub best: S,
    pub best_energy: f64,
    pub t0: f64,
    pub initial: S,
    pub initial_energy: f64,
    pub trace: Vec<AnnealStep<S>>,
}

/// Classic simulated annealing with geometric cooling `T_n = T0 * eta^n`.
pub fn anneal<P: AnnealProblem>(
    problem: &P,
    initial: P::State,
    config: &SaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AnnealOutcome<P::State>> {
    config.validate()?;
    let k = config.boltzmann_k;
    let mut current = initial.clone();
    let mut current_e = problem.energy(&current)?;
    let initial_e = current_e;
    let t0 = match config.t0 {
        Some(t) => t,
        None => calibrate_t0(problem, &current, current_e, config, rng)?,
    };
    let t_stop = t0 * config.t_stop_ratio;
    let mut best = current.clone();
    let mut best_e = current_e;
    let mut trace = Vec::new();
    let mut n = 0;
    loop {
        let t = t0 * config.cooling.powi(n as i32);
        if t <= t_stop {
            break;
        }
        for _ in 0..config.iters_per_temp {
            let cand = problem.perturb(&current, t, t0, rng)?;
            let e = problem.energy(&cand)?;
            let accepted = accept_move(e - current_e, k, t, rng);
            if e < best_e {
                best = cand.clone();
                best_e = e;
            }
            trace.push(AnnealStep {
                temperature: t,
                temperature_index: n,
                digest: problem.digest(&cand),
                candidate: cand.clone(),
                candidate_energy: e,
                current_energy: if accepted { e } else { current_e },
                best_energy: best_e,
                accepted,
            });
            if accepted {
                current = cand;
                current_e = e;
            }
        }
        n += 1;
    }
    Ok(AnnealOutcome {
        best,
        best_energy: best_e,
        t0,
        initial,
        initial_energy: initial_e,
        trace,
    })
}

/// Picks `T0` so the median uphill move of a warm-up batch is accepted with
/// probability `warmup_accept`.
fn calibrate_t0<P: AnnealProblem>(
    problem: &P,
    state: &P::State,
    energy: f64,
    config: &SaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut uphill = Vec::new();
    for _ in 0..config.warmup {
        let cand = problem.perturb(state, 1.0, 1.0, rng)?;
        let d = problem.energy(&cand)? - energy;
        if d > 0.0 {
            uphill.push(d);
        }
    }
    if uphill.is_empty() {
        return Ok(1.0);
    }
    uphill.sort_by(f64::total_cmp);
    let median = uphill[uphill.len() / 2];
    Ok(median / (config.boltzmann_k * (1.0 / config.warmup_accept).ln()))
}

/// Result of a fast (no retraining) evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub params_rate: f64,
    pub flops_rate: f64,
}

/// Everything the pruning search needs about the current round.
#[derive(Debug, Clone, Copy)]
pub struct SearchContext<'a> {
    pub network: &'a Network,
    /// Masks inherited from previous rounds.
    pub base: &'a MaskSet,
    pub eval: &'a Dataset,
    pub target: f64,
    pub objective: Objective,
    pub scheme: SchemeMode,
    /// Accepted realized rate as `(low, high)` multiples of `target`.
    pub band: (f64, f64),
    pub delta_max: f64,
}

impl SearchContext<'_> {
    /// Remaining (masked) weight count of each prunable layer in `action` order.
    pub fn layer_sizes(&self, action: &Action) -> Vec<usize> {
        action
            .layers
            .iter()
            .map(|l| self.base.layers[&l.layer].kept_weights())
            .collect()
    }

    /// Reduction of the active objective relative to the base masks.
    pub fn realized_rate(&self, action: &Action) -> Result<f64> {
        let masks = magnitude_prune(self.network, action, self.base)?;
        let before = objective_count(self.network, Some(self.base), self.objective)?;
        let after = objective_count(self.network, Some(&masks), self.objective)?;
        Ok(before / after.max(1.0))
    }

    pub fn within_target(&self, rate: f64) -> bool {
        rate >= self.band.0 * self.target * (1.0 - 1e-12) && rate <= self.band.1 * self.target * (1.0 + 1e-12)
    }

    /// Larger layers never get a smaller rate than smaller ones.
    pub fn ordering_holds(&self, action: &Action) -> bool {
        let sizes = self.layer_sizes(action);
        for a in 0..sizes.len() {
            for b in 0..sizes.len() {
                if sizes[a] > sizes[b] && action.layers[a].rate < action.layers[b].rate {
                    return false;
                }
            }
        }
        true
    }

    /// Both action invariants.
    pub fn is_valid(&self, action: &Action) -> Result<bool> {
        Ok(self.ordering_holds(action) && self.within_target(self.realized_rate(action)?))
    }

    /// Reassigns the multiset of rates so they are non-decreasing in layer size.
    fn sort_onto_sizes(&self, action: &mut Action) {
        let sizes = self.layer_sizes(action);
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by_key(|&i| (sizes[i], i));
        let mut rates: Vec<f64> = action.layers.iter().map(|l| l.rate).collect();
        rates.sort_by(f64::total_cmp);
        for (slot, &i) in order.iter().enumerate() {
            action.layers[i].rate = rates[slot];
        }
    }

    fn with_scale(action: &Action, log_rates: &[f64], s: f64) -> Action {
        let mut out = action.clone();
        for (l, &lr) in out.layers.iter_mut().zip(log_rates) {
            l.rate = (s * lr).exp();
        }
        out
    }

    /// Scales all log-rates by one common factor until the realized reduction
    /// lands near the target. Leaves the action untouched if it already does.
    pub fn normalize(&self, action: Action) -> Result<Action> {
        let realized = self.realized_rate(&action)?;
        if self.within_target(realized) {
            return Ok(action);
        }
        let log_rates: Vec<f64> = action.layers.iter().map(|l| l.rate.max(1.0).ln()).collect();
        if log_rates.iter().all(|&l| l <= 0.0) {
            return Err(Error::Infeasible("all layer rates are 1; cannot scale to the target".into()));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        // Rank: inside the band first, then at-or-above target, then closeness.
        let rank = |r: f64| (!self.within_target(r), r < self.target, (r / self.target).ln().abs());
        let mut best: Option<((bool, bool, f64), Action)> = None;
        let mut consider = |s: f64| -> Result<f64> {
            let cand = Self::with_scale(&action, &log_rates, s);
            let r = self.realized_rate(&cand)?;
            let key = rank(r);
            if best.as_ref().map_or(true, |(k, _)| key.partial_cmp(k) == Some(std::cmp::Ordering::Less)) {
                best = Some((key, cand));
            }
            Ok(r)
        };
        let mut grew = 0;
        while consider(hi)? < self.target {
            lo = hi;
            hi *= 2.0;
            grew += 1;
            if grew > 40 {
                break;
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let r = consider(mid)?;
            if r >= self.target && r <= self.target * 1.01 {
                break;
            }
            if r < self.target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (_, cand) = best.expect("at least one candidate");
        let r = self.realized_rate(&cand)?;
        if !self.within_target(r) {
            return Err(Error::Infeasible(format!(
                "closest realizable rate {r:.3} is outside [{:.3}, {:.3}]",
                self.band.0 * self.target,
                self.band.1 * self.target
            )));
        }
        Ok(cand)
    }
}

/// Random initial action: rates drawn at random and assigned non-decreasing
/// in layer size, random scheme splits, then normalized to the round target.
pub fn init_action(ctx: &SearchContext<'_>, rng: &mut ChaCha8Rng) -> Result<Action> {
    if ctx.target <= 1.0 {
        return Err(Error::Config(format!("round target must exceed 1, got {}", ctx.target)));
    }
    let layers = ctx.network.prunable_layers();
    if layers.is_empty() {
        return Err(Error::Infeasible("no prunable layers".into()));
    }
    let ln_target = ctx.target.ln();
    let mut action = Action {
        layers: layers
            .into_iter()
            .map(|layer| LayerAction {
                layer,
                rate: (ln_target * rng.gen_range(0.5..1.5)).exp(),
                split: ctx.scheme.fixed_split().unwrap_or_else(|| rng.gen_range(0.0..=1.0)),
            })
            .collect(),
    };
    ctx.sort_onto_sizes(&mut action);
    ctx.normalize(action)
}

/// Perturbs the log-rates and splits of a random third of the layers with a
/// magnitude shrinking in proportion to `t / t0`, then restores both action
/// invariants.
pub fn perturb(ctx: &SearchContext<'_>, action: &Action, t: f64, t0: f64, rng: &mut ChaCha8Rng) -> Result<Action> {
    let delta = ctx.delta_max * (t / t0).clamp(0.0, 1.0);
    let mut out = perturb_raw(action, delta, ctx.scheme, rng);
    ctx.sort_onto_sizes(&mut out);
    ctx.normalize(out)
}

/// The random move alone, before ordering and normalization.
pub fn perturb_raw(action: &Action, delta: f64, scheme: SchemeMode, rng: &mut ChaCha8Rng) -> Action {
    let mut out = action.clone();
    let n = out.layers.len();
    let count = n.div_ceil(3);
    for i in sample(rng, n, count).into_iter() {
        let l = &mut out.layers[i];
        let factor = if delta > 0.0 { rng.gen_range(1.0 - delta..=1.0 + delta) } else { 1.0 };
        l.rate = (l.rate.max(1.0).ln() * factor).exp();
        l.split = match scheme.fixed_split() {
            Some(s) => s,
            None => {
                let j = if delta > 0.0 { rng.gen_range(-delta..=delta) } else { 0.0 };
                (l.split + j).clamp(0.0, 1.0)
            }
        };
    }
    out
}

/// Magnitude-prunes a copy of the network per `action` and measures it.
pub fn fast_evaluate(ctx: &SearchContext<'_>, action: &Action) -> Result<EvalResult> {
    let masks = magnitude_prune(ctx.network, action, ctx.base)?;
    let pruned = apply_mask(ctx.network, &masks)?;
    let accuracy = evaluate_accuracy(&pruned, ctx.eval)?;
    let p0 = count_params(ctx.network, Some(ctx.base))?.conv as f64;
    let p1 = count_params(ctx.network, Some(&masks))?.conv as f64;
    let f0 = count_flops(ctx.network, Some(ctx.base))?.conv as f64;
    let f1 = count_flops(ctx.network, Some(&masks))?.conv as f64;
    Ok(EvalResult {
        accuracy,
        params_rate: p0 / p1.max(1.0),
        flops_rate: f0 / f1.max(1.0),
    })
}

struct PruningProblem<'a, 'b> {
    ctx: &'b SearchContext<'a>,
}

impl AnnealProblem for PruningProblem<'_, '_> {
    type State = Action;

    fn perturb(&self, state: &Action, t: f64, t0: f64, rng: &mut ChaCha8Rng) -> Result<Action> {
        perturb(self.ctx, state, t, t0, rng)
    }

    fn energy(&self, state: &Action) -> Result<f64> {
        Ok(1.0 - fast_evaluate(self.ctx, state)?.accuracy)
    }

    fn digest(&self, state: &Action) -> String {
        state.digest()
    }
}

/// One iteration of the pruning search, as exported in traces.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub temperature: f64,
    pub temperature_index: usize,
    pub action: Action,
    pub digest: String,
    pub accuracy: f64,
    pub current_accuracy: f64,
    pub best_accuracy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct SaOutcome {
    pub best: Action,
    pub best_accuracy: f64,
    pub t0: f64,
    pub trace: Vec<TraceEntry>,
}

impl SaOutcome {
    /// One CSV line per iteration.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,temperature,digest,accuracy,current_accuracy,best_accuracy,accepted\n");
        for (i, e) in self.trace.iter().enumerate() {
            s.push_str(&format!(
                "{i},{:.6e},{},{:.6},{:.6},{:.6},{}\n",
                e.temperature, e.digest, e.accuracy, e.current_accuracy, e.best_accuracy, e.accepted as u8
            ));
        }
        s
    }
}

/// Runs the annealing search for one round and returns the best action seen.
pub fn sa_run(ctx: &SearchContext<'_>, config: &SaConfig) -> Result<SaOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = init_action(ctx, &mut rng)?;
    let problem = PruningProblem { ctx };
    let out = anneal(&problem, initial, config, &mut rng)?;
    let trace = out
        .trace
        .into_iter()
        .map(|s| TraceEntry {
            temperature: s.temperature,
            temperature_index: s.temperature_index,
            digest: s.digest,
            action: s.candidate,
            accuracy: 1.0 - s.candidate_energy,
            current_accuracy: 1.0 - s.current_energy,
            best_accuracy: 1.0 - s.best_energy,
            accepted: s.accepted,
        })
        .collect();
    Ok(SaOutcome {
        best: out.best,
        best_accuracy: 1.0 - out.best_energy,
        t0: out.t0,
        trace,
    })
}
