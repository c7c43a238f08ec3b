//! Per-round run report and its CSV form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sa::{Action, LayerAction};
use crate::schemes::Objective;

pub const CSV_HEADER: &str = "round,phase,objective,params_rate,flops_rate,accuracy,wall_seconds,action_digest";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Baseline,
    /// A Phase I round that was kept.
    Prune,
    /// A Phase I round that fell below the accuracy floor and was discarded.
    Rejected,
    Purify,
    Scratch,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Prune => "prune",
            Phase::Rejected => "rejected",
            Phase::Purify => "purify",
            Phase::Scratch => "scratch",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Phase::Baseline,
            "prune" => Phase::Prune,
            "rejected" => Phase::Rejected,
            "purify" => Phase::Purify,
            "scratch" => Phase::Scratch,
            other => return Err(Error::Config(format!("unknown phase {other:?}"))),
        })
    }
}

/// One report line. Rates are cumulative conv-layer reductions relative to
/// the dense baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub round: usize,
    pub phase: Phase,
    pub objective: Objective,
    pub params_rate: f64,
    pub flops_rate: f64,
    pub accuracy: f64,
    pub wall_seconds: f64,
    pub action_digest: String,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.phase.as_str(),
            self.objective,
            self.params_rate,
            self.flops_rate,
            self.accuracy,
            self.wall_seconds,
            if self.action_digest.is_empty() { "-" } else { &self.action_digest }
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let [round, phase, objective, p, fl, acc, wall, digest] = f[..] else {
            return Err(Error::Config(format!("report line needs 8 fields: {line:?}")));
        };
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad number {s:?} in report"))) };
        Ok(Self {
            round: round.parse().map_err(|_| Error::Config(format!("bad round {round:?}")))?,
            phase: phase.parse()?,
            objective: objective.parse()?,
            params_rate: num(p)?,
            flops_rate: num(fl)?,
            accuracy: num(acc)?,
            wall_seconds: num(wall)?,
            action_digest: if digest == "-" { String::new() } else { digest.to_string() },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    /// Decided action of every kept or rejected round.
    pub actions: Vec<(usize, Action)>,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Config("report CSV header mismatch".into()));
        }
        Ok(Self {
            rows: lines.map(ReportRow::from_csv).collect::<Result<_>>()?,
            actions: Vec::new(),
        })
    }

    pub fn baseline(&self) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.phase == Phase::Baseline)
    }

    /// Rows describing the model as it currently stands: baseline, kept
    /// rounds and purification.
    pub fn accepted(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows
            .iter()
            .filter(|r| matches!(r.phase, Phase::Baseline | Phase::Prune | Phase::Purify))
    }

    /// Latest accepted row.
    pub fn last(&self) -> Option<&ReportRow> {
        self.accepted().last()
    }

    pub fn rows_of(&self, phase: Phase) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    /// Same rows ignoring wall-clock times.
    pub fn same_results(&self, other: &RunReport) -> bool {
        self.actions == other.actions
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                ReportRow {
                    wall_seconds: 0.0,
                    ..a.clone()
                } == ReportRow {
                    wall_seconds: 0.0,
                    ..b.clone()
                }
            })
    }

    /// Human-readable table with accuracy before/after each round and the
    /// scratch-training gap when present.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5}  {:<8}  {:>9}  {:>9}  {:>8}  {:>8}  {:>7}",
            "round", "phase", "params x", "flops x", "acc in", "acc out", "secs"
        );
        let mut prev = None;
        for r in &self.rows {
            let before = match r.phase {
                Phase::Baseline | Phase::Scratch => "".to_string(),
                _ => prev.map_or(String::new(), |a: f64| format!("{:.4}", a)),
            };
            let _ = writeln!(
                s,
                "{:>5}  {:<8}  {:>9.3}  {:>9.3}  {:>8}  {:>8.4}  {:>7.1}",
                r.round,
                r.phase.as_str(),
                r.params_rate,
                r.flops_rate,
                before,
                r.accuracy,
                r.wall_seconds
            );
            if matches!(r.phase, Phase::Baseline | Phase::Prune | Phase::Purify) {
                prev = Some(r.accuracy);
            }
        }
        if let (Some(last), Some(scratch)) = (self.last(), self.rows_of(Phase::Scratch).last()) {
            let _ = writeln!(
                s,
                "pruned accuracy {:.4}, from-scratch accuracy {:.4}, gap {:+.4}",
                last.accuracy,
                scratch.accuracy,
                last.accuracy - scratch.accuracy
            );
        }
        s
    }
}

/// `layer:rate:split` triples separated by `;`, exact to the bit.
pub fn encode_action(action: &Action) -> String {
    action
        .layers
        .iter()
        .map(|l| format!("{}:{}:{}", l.layer, l.rate, l.split))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn decode_action(text: &str) -> Result<Action> {
    let bad = || Error::Config(format!("bad action {text:?}"));
    let layers = text
        .split(';')
        .map(|part| {
            let f: Vec<&str> = part.split(':').collect();
            let [l, r, s] = f[..] else { return Err(bad()) };
            Ok(LayerAction {
                layer: l.parse().map_err(|_| bad())?,
                rate: r.parse().map_err(|_| bad())?,
                split: s.parse().map_err(|_| bad())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Action { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, phase: Phase, acc: f64) -> ReportRow {
        ReportRow {
            round,
            phase,
            objective: Objective::Params,
            params_rate: 1.0 + round as f64 * 0.1 / 3.0,
            flops_rate: 1.25,
            accuracy: acc,
            wall_seconds: 0.5,
            action_digest: if round > 0 { "00ff".into() } else { String::new() },
        }
    }

    #[test]
    fn csv_roundtrip_exact() {
        let rep = RunReport {
            rows: vec![row(0, Phase::Baseline, 0.9), row(1, Phase::Prune, 1.0 / 3.0), row(1, Phase::Scratch, 0.8)],
            actions: Vec::new(),
        };
        let text = rep.to_csv();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(RunReport::from_csv(&text).unwrap(), rep);
    }

    #[test]
    fn summary_mentions_gap() {
        let rep = RunReport {
            rows: vec![row(0, Phase::Baseline, 0.9), row(1, Phase::Prune, 0.88), row(1, Phase::Scratch, 0.8)],
            actions: Vec::new(),
        };
        assert!(rep.summary().contains("gap +0.0800"));
    }

    #[test]
    fn action_text_roundtrip() {
        let a = Action {
            layers: vec![
                LayerAction { layer: 0, rate: 1.0 / 3.0 + 1.0, split: 0.1 },
                LayerAction { layer: 3, rate: 2.5, split: 1.0 },
            ],
        };
        assert_eq!(decode_action(&encode_action(&a)).unwrap(), a);
    }
}
