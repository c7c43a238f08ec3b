//! Progressive compression rounds, purification, and from-scratch retraining.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{DataConfig, RunConfig};
use super::report::{decode_action, encode_action, Phase, ReportRow, RunReport};
use crate::admm::{admm_regularize, hard_prune_retrain};
use crate::error::{Error, Result};
use crate::fixtures::glyph_splits;
use crate::model::{
    build_network, evaluate_accuracy, load_dataset, synth_dataset_with, train, Dataset, DatasetSource, Network,
    Split, TrainConfig,
};
use crate::purify::{purify, search_thresholds, shrink_network, PurifyConfig, ThresholdSearchConfig};
use crate::sa::{sa_run, SearchContext};
use crate::schemes::{count_flops, count_params, objective_count, MaskSet, Objective};
use crate::seeds::{derive_seed, tag};

/// Loads (or generates) the train and test splits described by `cfg`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data {
        DataConfig::Synth { train, test, spec } => {
            // One draw so both splits share the class prototypes.
            let all = synth_dataset_with(derive_seed(cfg.seed, tag::DATA), train + test, cfg.classes, spec)?;
            all.split_test(*test)?
        }
        DataConfig::Glyphs { train, test, spec } => {
            glyph_splits(derive_seed(cfg.seed, tag::DATA), *train, *test, cfg.classes, spec)?
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_dataset(
                DatasetSource::Idx {
                    images: train_images,
                    labels: train_labels,
                },
                cfg.classes,
                Split::Train,
            )?,
            load_dataset(
                DatasetSource::Idx {
                    images: test_images,
                    labels: test_labels,
                },
                cfg.classes,
                Split::Test,
            )?,
        ),
        DataConfig::Cifar10 { train, test } => {
            let mut parts = Vec::new();
            for p in train {
                parts.push(load_dataset(DatasetSource::Cifar10 { batch: p }, cfg.classes, Split::Train)?);
            }
            (
                Dataset::concat(&parts)?,
                load_dataset(DatasetSource::Cifar10 { batch: test }, cfg.classes, Split::Test)?,
            )
        }
    };
    let limit = |d: Dataset, n: usize| if n > 0 && n < d.len() { d.head(n) } else { d };
    Ok((limit(train, cfg.train_limit), limit(test, cfg.test_limit)))
}

fn baseline_train_config(cfg: &RunConfig, epochs: usize, seed_tag: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: cfg.lr,
        batch: cfg.batch,
        seed: derive_seed(cfg.seed, seed_tag),
    }
}

/// Builds and trains the dense baseline; returns it with its test accuracy.
pub fn train_baseline(cfg: &RunConfig, train_set: &Dataset, test: &Dataset) -> Result<(Network, f64)> {
    let mut net = build_network(&cfg.arch, train_set.image_shape(), cfg.classes, derive_seed(cfg.seed, tag::INIT))?;
    train(&mut net, train_set, &baseline_train_config(cfg, cfg.baseline_epochs, tag::BASELINE))?;
    let acc = evaluate_accuracy(&net, test)?;
    Ok((net, acc))
}

/// Discards the weights of `structure`, re-initializes them randomly and
/// trains with the given recipe. Returns the test accuracy.
pub fn train_from_scratch(
    structure: &Network,
    train_set: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, f64)> {
    let mut net = structure.reinitialized(config.seed);
    train(&mut net, train_set, config)?;
    let acc = evaluate_accuracy(&net, test)?;
    Ok((net, acc))
}

/// Phase II on a masked network: threshold search on `held_out`, then
/// purification. The result is still dense-shaped; see [`shrink_network`].
pub fn purify_phase(
    network: &Network,
    masks: &MaskSet,
    held_out: &Dataset,
    config: &ThresholdSearchConfig,
) -> Result<(Network, MaskSet, PurifyConfig)> {
    let thresholds = search_thresholds(network, masks, held_out, config)?;
    let (net, m) = purify(network, masks, &thresholds)?;
    Ok((net, m, thresholds))
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    /// All configured rounds were kept.
    Completed,
    /// Round `round` fell below the floor and was discarded.
    AccuracyFloor { round: usize, accuracy: f64, floor: f64 },
    /// No action could reach the round target, even after halving it.
    Infeasible { round: usize, message: String },
    /// Stopped on request after checkpointing `round`.
    Halted { round: usize },
}

impl StopReason {
    fn encode(&self) -> String {
        match self {
            StopReason::Completed => "completed".into(),
            StopReason::AccuracyFloor { round, accuracy, floor } => format!("floor {round} {accuracy} {floor}"),
            StopReason::Infeasible { round, message } => format!("infeasible {round} {message}"),
            StopReason::Halted { round } => format!("halted {round}"),
        }
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad stop reason {s:?}"));
        let mut parts = s.splitn(3, ' ');
        let kind = parts.next().ok_or_else(bad)?;
        let round = || -> Result<usize> { s.split(' ').nth(1).and_then(|r| r.parse().ok()).ok_or_else(bad) };
        Ok(match kind {
            "completed" => StopReason::Completed,
            "halted" => StopReason::Halted { round: round()? },
            "infeasible" => StopReason::Infeasible {
                round: round()?,
                message: parts.nth(1).unwrap_or("").to_string(),
            },
            "floor" => {
                let f: Vec<&str> = s.split(' ').collect();
                let [_, r, a, fl] = f[..] else { return Err(bad()) };
                StopReason::AccuracyFloor {
                    round: r.parse().map_err(|_| bad())?,
                    accuracy: a.parse().map_err(|_| bad())?,
                    floor: fl.parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        })
    }

    /// True when the first round already failed, so nothing was compressed.
    pub fn failed_first_round(&self) -> bool {
        matches!(
            self,
            StopReason::AccuracyFloor { round: 1, .. } | StopReason::Infeasible { round: 1, .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    /// Final network: shrunk after Phase II, otherwise masked dense-shaped.
    pub network: Network,
    pub masks: MaskSet,
    pub baseline_accuracy: f64,
    pub floor: f64,
    pub stop: StopReason,
}

impl RunOutcome {
    /// Turns a failed first round into [`Error::BelowFloor`] /
    /// [`Error::Infeasible`]; later stops are normal outcomes.
    pub fn into_result(self) -> Result<Self> {
        match &self.stop {
            StopReason::AccuracyFloor { round: 1, accuracy, floor } => Err(Error::BelowFloor {
                round: 1,
                accuracy: *accuracy,
                floor: *floor,
            }),
            StopReason::Infeasible { round: 1, message } => Err(Error::Infeasible(message.clone())),
            _ => Ok(self),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for `checkpoint.acmp`, `report.csv` and search traces.
    pub out_dir: Option<PathBuf>,
    /// Start from this trained network instead of training a baseline.
    pub pretrained: Option<Network>,
    /// Continue a previous run from its checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop right after checkpointing this round (no Phase II).
    pub halt_after_round: Option<usize>,
}

/// Everything needed to continue a run at a round boundary.
struct RunState {
    network: Network,
    masks: MaskSet,
    report: RunReport,
    /// Last round processed (kept or rejected).
    round: usize,
    baseline_accuracy: f64,
    floor: f64,
    dense_params: usize,
    dense_flops: u64,
    dense_objective: f64,
    goal: f64,
    stop: Option<StopReason>,
    final_stage: bool,
}

impl RunState {
    fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut m = BTreeMap::new();
        m.insert("config.digest".into(), cfg.digest());
        m.insert("stage".into(), if self.final_stage { "final" } else { "round" }.into());
        m.insert("round".into(), self.round.to_string());
        m.insert("baseline.accuracy".into(), self.baseline_accuracy.to_string());
        m.insert("floor".into(), self.floor.to_string());
        m.insert("dense.conv_params".into(), self.dense_params.to_string());
        m.insert("dense.conv_flops".into(), self.dense_flops.to_string());
        m.insert("dense.objective".into(), self.dense_objective.to_string());
        m.insert("goal".into(), self.goal.to_string());
        if let Some(s) = &self.stop {
            m.insert("stop".into(), s.encode());
        }
        for (i, r) in self.report.rows.iter().enumerate() {
            m.insert(format!("report.{i:04}"), r.to_csv());
        }
        for (round, a) in &self.report.actions {
            m.insert(format!("action.{round:04}"), encode_action(a));
        }
        Checkpoint {
            network: self.network.clone(),
            masks: self.masks.clone(),
            metadata: m,
        }
    }

    fn from_checkpoint(ckpt: Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let m = &ckpt.metadata;
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Config(format!("checkpoint lacks {k}; not a run checkpoint")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Config(format!("bad {k}"))) };
        if get("config.digest")? != &cfg.digest() {
            return Err(Error::Config(
                "checkpoint was written with different settings; refusing to resume".into(),
            ));
        }
        let mut report = RunReport::default();
        for (k, v) in m.range("report.".to_string()..) {
            if !k.starts_with("report.") {
                break;
            }
            report.rows.push(ReportRow::from_csv(v)?);
        }
        for (k, v) in m.range("action.".to_string()..) {
            if !k.starts_with("action.") {
                break;
            }
            let round = k["action.".len()..].parse().map_err(|_| Error::Config(format!("bad key {k}")))?;
            report.actions.push((round, decode_action(v)?));
        }
        Ok(Self {
            round: num("round")? as usize,
            baseline_accuracy: num("baseline.accuracy")?,
            floor: num("floor")?,
            dense_params: num("dense.conv_params")? as usize,
            dense_flops: num("dense.conv_flops")? as u64,
            dense_objective: num("dense.objective")?,
            goal: num("goal")?,
            stop: m.get("stop").map(|s| StopReason::decode(s)).transpose()?,
            final_stage: get("stage")? == "final",
            report,
            network: ckpt.network,
            masks: ckpt.masks,
        })
    }

    fn row(&self, round: usize, phase: Phase, objective: Objective, accuracy: f64, secs: f64, digest: String) -> Result<ReportRow> {
        self.row_for(&self.network, &self.masks, round, phase, objective, accuracy, secs, digest)
    }

    #[allow(clippy::too_many_arguments)]
    fn row_for(
        &self,
        network: &Network,
        masks: &MaskSet,
        round: usize,
        phase: Phase,
        objective: Objective,
        accuracy: f64,
        secs: f64,
        digest: String,
    ) -> Result<ReportRow> {
        let p = count_params(network, Some(masks))?.conv as f64;
        let f = count_flops(network, Some(masks))?.conv as f64;
        Ok(ReportRow {
            round,
            phase,
            objective,
            params_rate: self.dense_params as f64 / p.max(1.0),
            flops_rate: self.dense_flops as f64 / f.max(1.0),
            accuracy,
            wall_seconds: secs,
            action_digest: digest,
        })
    }

    fn outcome(self) -> RunOutcome {
        RunOutcome {
            report: self.report,
            network: self.network,
            masks: self.masks,
            baseline_accuracy: self.baseline_accuracy,
            floor: self.floor,
            stop: self.stop.unwrap_or(StopReason::Completed),
        }
    }
}

fn persist(state: &RunState, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&state.to_checkpoint(cfg), &dir.join("checkpoint.acmp"))?;
        std::fs::write(dir.join("report.csv"), state.report.to_csv())?;
    }
    Ok(())
}

/// Full compression run: baseline, progressive Phase I rounds while the
/// accuracy floor holds, Phase II, and optional from-scratch retraining.
/// A checkpoint and the report are written after every step when
/// `opts.out_dir` is set, and `opts.resume` continues from such a checkpoint.
pub fn run_autocompress(
    cfg: &RunConfig,
    train_set: &Dataset,
    test: &Dataset,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let out_dir = opts.out_dir.as_deref();
    let mut state = match &opts.resume {
        Some(path) => RunState::from_checkpoint(load_checkpoint(path)?, cfg)?,
        None => {
            let start = Instant::now();
            let (network, baseline_accuracy) = match &opts.pretrained {
                Some(net) => (net.clone(), evaluate_accuracy(net, test)?),
                None => train_baseline(cfg, train_set, test)?,
            };
            let masks = MaskSet::dense(&network);
            let floor = cfg.acc_floor.unwrap_or(baseline_accuracy - cfg.floor_margin);
            let mut s = RunState {
                dense_params: count_params(&network, None)?.conv,
                dense_flops: count_flops(&network, None)?.conv,
                dense_objective: objective_count(&network, None, cfg.objective)?,
                network,
                masks,
                report: RunReport::default(),
                round: 0,
                baseline_accuracy,
                floor,
                goal: 1.0,
                stop: None,
                final_stage: false,
            };
            let row = s.row(0, Phase::Baseline, cfg.objective, baseline_accuracy, start.elapsed().as_secs_f64(), String::new())?;
            s.report.rows.push(row);
            persist(&s, cfg, out_dir)?;
            s
        }
    };
    if state.final_stage {
        return Ok(state.outcome());
    }
    // A halted run continues; any other recorded stop goes straight to Phase II.
    if matches!(state.stop, Some(StopReason::Halted { .. })) {
        state.stop = None;
    }
    let eval = test.head(cfg.eval_subset.min(test.len()));
    while state.stop.is_none() && state.round < cfg.rounds {
        let t = state.round + 1;
        if let Some(stop) = run_round(cfg, &mut state, train_set, test, &eval, t, out_dir)? {
            state.stop = Some(stop);
        }
        state.round = t;
        if state.stop.is_none() && opts.halt_after_round == Some(t) {
            state.stop = Some(StopReason::Halted { round: t });
            persist(&state, cfg, out_dir)?;
            return Ok(state.outcome());
        }
        persist(&state, cfg, out_dir)?;
    }
    if state.stop.as_ref().is_some_and(StopReason::failed_first_round) {
        return Ok(state.outcome());
    }
    finish(cfg, &mut state, train_set, test, &eval)?;
    persist(&state, cfg, out_dir)?;
    Ok(state.outcome())
}

/// One Phase I round. Returns a stop reason when the run must end here.
fn run_round(
    cfg: &RunConfig,
    state: &mut RunState,
    train_set: &Dataset,
    test: &Dataset,
    eval: &Dataset,
    t: usize,
    out_dir: Option<&Path>,
) -> Result<Option<StopReason>> {
    let start = Instant::now();
    let nominal = cfg.target_for_round(t);
    let achieved = state.dense_objective / objective_count(&state.network, Some(&state.masks), cfg.objective)?.max(1.0);
    let goal = state.goal * nominal;
    let mut target = if cfg.compensate { (goal / achieved).max(1.1) } else { nominal };
    let sa_cfg = cfg.sa_config(t);
    let mut halved = false;
    let outcome = loop {
        let ctx = SearchContext {
            network: &state.network,
            base: &state.masks,
            eval,
            target,
            objective: cfg.objective,
            scheme: cfg.scheme,
            band: cfg.band,
            delta_max: cfg.sa_delta_max,
        };
        match sa_run(&ctx, &sa_cfg) {
            Ok(o) => break o,
            Err(Error::Infeasible(msg)) => {
                if halved {
                    return Ok(Some(StopReason::Infeasible { round: t, message: msg }));
                }
                halved = true;
                target = 1.0 + (target - 1.0) / 2.0;
            }
            Err(e) => return Err(e),
        }
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("search-round{t}.csv")), outcome.trace_csv())?;
    }
    let action = outcome.best;
    let mut net = state.network.clone();
    let admm_cfg = cfg.admm_config(t);
    let (admm_state, _history) = admm_regularize(&mut net, &action, &state.masks, train_set, &admm_cfg)?;
    let (masks, accuracy) = hard_prune_retrain(&mut net, &admm_state, train_set, test, &admm_cfg)?;
    state.report.actions.push((t, action.clone()));
    if accuracy < state.floor {
        let secs = start.elapsed().as_secs_f64();
        let row = state.row_for(&net, &masks, t, Phase::Rejected, cfg.objective, accuracy, secs, action.digest())?;
        state.report.rows.push(row);
        return Ok(Some(StopReason::AccuracyFloor {
            round: t,
            accuracy,
            floor: state.floor,
        }));
    }
    state.network = net;
    state.masks = masks;
    state.goal = if halved { achieved * target } else { goal };
    let row = state.row(t, Phase::Prune, cfg.objective, accuracy, start.elapsed().as_secs_f64(), action.digest())?;
    state.report.rows.push(row);
    if cfg.purify && cfg.purify_per_round {
        let start = Instant::now();
        let (net, masks, _) = purify_phase(&state.network, &state.masks, eval, &cfg.purify_config(t))?;
        state.network = net;
        state.masks = masks;
        let acc = evaluate_accuracy(&state.network, test)?;
        let row = state.row(t, Phase::Purify, cfg.objective, acc, start.elapsed().as_secs_f64(), String::new())?;
        state.report.rows.push(row);
    }
    Ok(None)
}

/// Phase II (unless already done per round), physical shrinking, and the
/// optional from-scratch comparison.
fn finish(cfg: &RunConfig, state: &mut RunState, train_set: &Dataset, test: &Dataset, eval: &Dataset) -> Result<()> {
    let last_round = state.report.last().map_or(0, |r| r.round);
    let start = Instant::now();
    if cfg.purify && !cfg.purify_per_round {
        let (net, masks, _) = purify_phase(&state.network, &state.masks, eval, &cfg.purify_config(last_round))?;
        state.network = net;
        state.masks = masks;
    }
    state.network = shrink_network(&state.network, &state.masks)?;
    state.masks = MaskSet::dense(&state.network);
    if cfg.purify && !cfg.purify_per_round {
        let acc = evaluate_accuracy(&state.network, test)?;
        let row = state.row(last_round, Phase::Purify, cfg.objective, acc, start.elapsed().as_secs_f64(), String::new())?;
        state.report.rows.push(row);
    }
    if cfg.scratch_epochs > 0 {
        let start = Instant::now();
        let scratch_cfg = baseline_train_config(cfg, cfg.scratch_epochs, tag::SCRATCH);
        let (_, acc) = train_from_scratch(&state.network, train_set, test, &scratch_cfg)?;
        let row = state.row(last_round, Phase::Scratch, cfg.objective, acc, start.elapsed().as_secs_f64(), String::new())?;
        state.report.rows.push(row);
    }
    state.final_stage = true;
    Ok(())
}

/// Checks that the last accepted report rates match a recount of the
/// checkpoint's network. Returns the recounted `(params_rate, flops_rate)`.
pub fn verify_report(ckpt: &Checkpoint) -> Result<(f64, f64)> {
    let m = &ckpt.metadata;
    let dense = |k: &str| -> Result<f64> {
        m.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks {k}")))
    };
    let p = dense("dense.conv_params")? / (count_params(&ckpt.network, Some(&ckpt.masks))?.conv as f64).max(1.0);
    let f = dense("dense.conv_flops")? / (count_flops(&ckpt.network, Some(&ckpt.masks))?.conv as f64).max(1.0);
    let rows: Vec<ReportRow> = m
        .iter()
        .filter(|(k, _)| k.starts_with("report."))
        .map(|(_, v)| ReportRow::from_csv(v))
        .collect::<Result<_>>()?;
    let report = RunReport { rows, actions: Vec::new() };
    let last = report.last().ok_or_else(|| Error::Config("checkpoint has no report rows".into()))?;
    if (last.params_rate - p).abs() > 1e-9 * p || (last.flops_rate - f).abs() > 1e-9 * f {
        return Err(Error::Contract(format!(
            "report says {:.6}x params / {:.6}x flops, checkpoint recounts {p:.6}x / {f:.6}x",
            last.params_rate, last.flops_rate
        )));
    }
    Ok((p, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_reason_text_roundtrip() {
        for s in [
            StopReason::Completed,
            StopReason::Halted { round: 2 },
            StopReason::AccuracyFloor { round: 3, accuracy: 0.25, floor: 0.5 },
            StopReason::Infeasible { round: 1, message: "no way out".into() },
        ] {
            assert_eq!(StopReason::decode(&s.encode()).unwrap(), s);
        }
    }
}
