//! Streaming evaluation: runs the query stream through an engine with the
//! simulated user, logs one row per query and derives metrics from the log.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::{ThresholdVariant, Verdict};
use crate::model::Direction;
use crate::par;
use crate::session::{session_rng, Engine, Query, SamplingStrategy, SessionConfig};
use crate::sim::{SimWorld, SimulatedUser};

const USER_STREAM_SALT: u64 = 0x5eed_0f05_e2e2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Answer,
    Reject,
    Unanswerable,
}

impl VerdictKind {
    pub fn of(v: &Verdict) -> Self {
        match v {
            Verdict::Answer { .. } => VerdictKind::Answer,
            Verdict::Reject { .. } => VerdictKind::Reject,
            Verdict::Unanswerable { .. } => VerdictKind::Unanswerable,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Answer => "answer",
            VerdictKind::Reject => "reject",
            VerdictKind::Unanswerable => "unanswerable",
        }
    }
}

/// One row of the per-query log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub idx: usize,
    pub query: Query,
    pub e_known: bool,
    pub r_known: bool,
    pub asked_clue: bool,
    pub asked_fact: bool,
    pub verdict: VerdictKind,
    /// Raw rank of the best-ranked true answer registered in the KB.
    pub rank: Option<usize>,
    /// Some true answer is registered in the KB at decision time.
    pub ae: bool,
}

/// Per-query result as seen by a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ranked(usize),
    Miss,
    CorrectRejection,
}

impl LogEntry {
    pub fn is_open_world(&self) -> bool {
        !(self.e_known && self.r_known)
    }

    /// MRR view: a correctly rejected query is excluded, any other query
    /// contributes the reciprocal rank of its best true answer, or 0.
    pub fn mrr_outcome(&self) -> Outcome {
        match (self.verdict, self.ae, self.rank) {
            (VerdictKind::Reject, false, _) => Outcome::CorrectRejection,
            (VerdictKind::Unanswerable, _, _) => Outcome::Miss,
            (_, true, Some(r)) => Outcome::Ranked(r),
            _ => Outcome::Miss,
        }
    }

    /// Hits view: only answered queries can rank; a correct rejection is a hit.
    pub fn hits_outcome(&self) -> Outcome {
        match (self.verdict, self.ae, self.rank) {
            (VerdictKind::Reject, false, _) => Outcome::CorrectRejection,
            (VerdictKind::Answer, true, Some(r)) => Outcome::Ranked(r),
            _ => Outcome::Miss,
        }
    }
}

/// Mean reciprocal rank; misses count 0 and correct rejections are skipped.
/// `None` when nothing is counted.
pub fn mrr(outcomes: &[Outcome]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for o in outcomes {
        match o {
            Outcome::Ranked(r) => {
                sum += 1.0 / *r as f64;
                n += 1;
            }
            Outcome::Miss => n += 1,
            Outcome::CorrectRejection => {}
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Percentage of outcomes ranked within `k` or correctly rejected.
pub fn hits_at_k(outcomes: &[Outcome], k: usize) -> Option<f64> {
    if outcomes.is_empty() {
        return None;
    }
    let hits = outcomes
        .iter()
        .filter(|o| match o {
            Outcome::Ranked(r) => *r <= k,
            Outcome::CorrectRejection => true,
            Outcome::Miss => false,
        })
        .count();
    Some(100.0 * hits as f64 / outcomes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub p_pred_given_ae: Option<f64>,
    pub p_reject_given_not_ae: Option<f64>,
    pub ae: usize,
    pub not_ae: usize,
}

/// Conditional prediction and rejection frequencies over sessions that
/// reached a decision (answer or reject).
pub fn rejection_stats<'a>(log: impl IntoIterator<Item = &'a LogEntry>) -> RejectionStats {
    let (mut ae, mut pred, mut not_ae, mut rej) = (0, 0, 0, 0);
    for e in log {
        match (e.verdict, e.ae) {
            (VerdictKind::Unanswerable, _) => {}
            (v, true) => {
                ae += 1;
                pred += (v == VerdictKind::Answer) as usize;
            }
            (v, false) => {
                not_ae += 1;
                rej += (v == VerdictKind::Reject) as usize;
            }
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    RejectionStats {
        p_pred_given_ae: ratio(pred, ae),
        p_reject_given_not_ae: ratio(rej, not_ae),
        ae,
        not_ae,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mrr: Option<f64>,
    /// Queries entering the MRR mean.
    pub mrr_count: usize,
    pub hits1: Option<f64>,
    pub hits10: Option<f64>,
}

pub fn metrics<'a>(log: impl IntoIterator<Item = &'a LogEntry>) -> Metrics {
    let log: Vec<&LogEntry> = log.into_iter().collect();
    let m: Vec<Outcome> = log.iter().map(|e| e.mrr_outcome()).collect();
    let h: Vec<Outcome> = log.iter().map(|e| e.hits_outcome()).collect();
    Metrics {
        count: log.len(),
        mrr: mrr(&m),
        mrr_count: m.iter().filter(|o| **o != Outcome::CorrectRejection).count(),
        hits1: hits_at_k(&h, 1),
        hits10: hits_at_k(&h, 10),
    }
}

/// Subset label for a query's registration flags at stream start.
pub fn subset_label(r_known: bool, e_known: bool) -> &'static str {
    match (r_known, e_known) {
        (true, true) => "Rel-K/Ent-K",
        (true, false) => "Rel-K/Ent-UNK",
        (false, true) => "Rel-UNK/Ent-K",
        (false, false) => "Rel-UNK/Ent-UNK",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub fraction: f64,
    /// Predicted queries in the stream prefix.
    pub overall: Metrics,
    /// Predicted open-world queries in the stream prefix.
    pub open_world: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub v: u32,
    pub queries: usize,
    pub overall: Metrics,
    pub subsets: BTreeMap<String, Metrics>,
    pub rejection: RejectionStats,
    pub over_time: Vec<Slice>,
    pub verdicts: BTreeMap<String, usize>,
}

pub const SLICES: [f64; 2] = [0.5, 1.0];

impl EvalReport {
    pub fn from_log(log: &[LogEntry]) -> EvalReport {
        let mut subsets = BTreeMap::new();
        for r in [true, false] {
            for e in [true, false] {
                let cell = metrics(log.iter().filter(|x| x.r_known == r && x.e_known == e));
                subsets.insert(subset_label(r, e).to_owned(), cell);
            }
        }
        let over_time = SLICES
            .iter()
            .map(|&fraction| {
                let end = (fraction * log.len() as f64).round() as usize;
                let predicted: Vec<&LogEntry> =
                    log[..end].iter().filter(|e| e.verdict == VerdictKind::Answer).collect();
                Slice {
                    fraction,
                    overall: metrics(predicted.iter().copied()),
                    open_world: metrics(predicted.iter().copied().filter(|e| e.is_open_world())),
                }
            })
            .collect();
        let mut verdicts = BTreeMap::new();
        for kind in [VerdictKind::Answer, VerdictKind::Reject, VerdictKind::Unanswerable] {
            verdicts.insert(kind.as_str().to_owned(), log.iter().filter(|e| e.verdict == kind).count());
        }
        EvalReport {
            v: 1,
            queries: log.len(),
            overall: metrics(log),
            subsets,
            rejection: rejection_stats(log),
            over_time,
            verdicts,
        }
    }

    pub fn hits1(&self) -> f64 {
        self.overall.hits1.unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn flag(b: bool) -> u8 {
    b as u8
}

pub fn write_log<W: Write>(w: &mut W, log: &[LogEntry]) -> io::Result<()> {
    writeln!(
        w,
        "idx\tdirection\tentity\trelation\te_known\tr_known\tasked_clue\tasked_fact\tverdict\trank\tae_flag"
    )?;
    for e in log {
        let direction = match e.query.direction {
            Direction::Head => "head",
            Direction::Tail => "tail",
        };
        let rank = e.rank.map_or_else(|| "-".to_owned(), |r| r.to_string());
        writeln!(
            w,
            "{}\t{direction}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{rank}\t{}",
            e.idx,
            e.query.entity,
            e.query.relation,
            flag(e.e_known),
            flag(e.r_known),
            flag(e.asked_clue),
            flag(e.asked_fact),
            e.verdict.as_str(),
            flag(e.ae)
        )?;
    }
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogEntry>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let err = |m: &str| format!("line {}: {m}", i + 1);
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 11 {
            return Err(err("expected 11 columns"));
        }
        let b = |s: &str| match s {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(err("bad flag")),
        };
        out.push(LogEntry {
            idx: c[0].parse().map_err(|_| err("bad idx"))?,
            query: Query {
                direction: match c[1] {
                    "head" => Direction::Head,
                    "tail" => Direction::Tail,
                    _ => return Err(err("bad direction")),
                },
                entity: c[2].to_owned(),
                relation: c[3].to_owned(),
            },
            e_known: b(c[4])?,
            r_known: b(c[5])?,
            asked_clue: b(c[6])?,
            asked_fact: b(c[7])?,
            verdict: match c[8] {
                "answer" => VerdictKind::Answer,
                "reject" => VerdictKind::Reject,
                "unanswerable" => VerdictKind::Unanswerable,
                _ => return Err(err("bad verdict")),
            },
            rank: match c[9] {
                "-" => None,
                s => Some(s.parse().map_err(|_| err("bad rank"))?),
            },
            ae: b(c[10])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub seed: u64,
    /// Truncates the shuffled stream.
    pub max_queries: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub log: Vec<LogEntry>,
    pub report: EvalReport,
}

/// Stream order: one shuffle of the world's queries under `seed`.
pub fn stream_order(world: &SimWorld, cfg: &StreamConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..world.queries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    if let Some(n) = cfg.max_queries {
        order.truncate(n);
    }
    order
}

/// Feeds the shuffled query stream through `engine`, one session per query.
pub fn run_stream(world: &SimWorld, engine: &mut Engine, cfg: &StreamConfig) -> EvalRun {
    let order = stream_order(world, cfg);
    let mut log = Vec::with_capacity(order.len());
    for (idx, &qi) in order.iter().enumerate() {
        let wq = &world.queries[qi];
        let rng = session_rng(cfg.seed ^ USER_STREAM_SALT, idx as u64);
        let mut user = SimulatedUser::new(world, wq.query.clone(), rng);
        let (verdict, asked_clue, asked_fact, ranking) = match engine.process_query(wq.query.clone(), &mut user) {
            Ok(out) => (VerdictKind::of(&out.verdict), out.asked_clue, out.asked_fact, out.ranking),
            Err(e) => {
                log::warn!("query {idx} {}: {e}", wq.query);
                (VerdictKind::Unanswerable, false, false, None)
            }
        };
        let registered: Vec<_> = wq.answers.iter().filter_map(|a| engine.kb.entity_id(a)).collect();
        let rank = ranking.as_ref().and_then(|r| r.best_rank(&registered));
        log.push(LogEntry {
            idx,
            query: wq.query.clone(),
            e_known: wq.e_known,
            r_known: wq.r_known,
            asked_clue,
            asked_fact,
            verdict,
            rank,
            ae: !registered.is_empty(),
        });
        if (idx + 1) % 100 == 0 {
            log::info!("{} / {} queries", idx + 1, order.len());
        }
    }
    let report = EvalReport::from_log(&log);
    EvalRun { log, report }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub config: SessionConfig,
}

/// One isolated run per cell, each on its own copy of `initial`, all on the
/// same stream order. Cells run in parallel.
pub fn sweep(world: &SimWorld, initial: &Engine, cells: &[Cell], stream: &StreamConfig) -> Vec<(String, EvalRun)> {
    par::map_slice(cells, |cell| {
        let mut engine = initial.clone();
        engine.set_config(cell.config);
        (cell.label.clone(), run_stream(world, &mut engine, stream))
    })
}

/// Threshold variants under `base`'s sampling strategy.
pub fn threshold_grid(base: SessionConfig) -> Vec<Cell> {
    ThresholdVariant::ALL
        .iter()
        .map(|&v| Cell {
            label: format!("{v}-{}", base.sampling_strategy),
            config: SessionConfig {
                threshold_variant: v,
                ..base
            },
        })
        .collect()
}

/// Sampling strategies under `base`'s threshold variant.
pub fn strategy_grid(base: SessionConfig) -> Vec<Cell> {
    [SamplingStrategy::BTr, SamplingStrategy::EntTr, SamplingStrategy::RelTr]
        .iter()
        .map(|&s| Cell {
            label: format!("{}-{s}", base.threshold_variant),
            config: SessionConfig {
                sampling_strategy: s,
                ..base
            },
        })
        .collect()
}

/// `(#C, #EF)` budgets plus `(1,3)-U`, the buffer-disabled variant.
pub fn budget_grid(base: SessionConfig) -> Vec<Cell> {
    let mut cells: Vec<Cell> = [(1, 1), (1, 2), (1, 3), (2, 2)]
        .iter()
        .map(|&(c, f)| Cell {
            label: format!("({c},{f})"),
            config: SessionConfig {
                max_clues: c,
                max_entity_facts: f,
                ..base
            },
        })
        .collect();
    cells.push(Cell {
        label: "(1,3)-U".into(),
        config: SessionConfig {
            max_clues: 1,
            max_entity_facts: 3,
            use_performance_buffer: false,
            ..base
        },
    });
    cells
}

/// Plain-text table of H@1, H@10 and MRR per cell.
pub fn format_table(rows: &[(String, EvalRun)]) -> String {
    let mut s = format!(
        "{:<14} {:>8} {:>8} {:>8} {:>10} {:>10}\n",
        "cell", "MRR", "H@1", "H@10", "Pr(p|AE)", "Pr(R|¬AE)"
    );
    let f = |x: Option<f64>, scale: f64| x.map_or_else(|| "-".to_owned(), |v| format!("{:.2}", v * scale));
    for (label, run) in rows {
        let r = &run.report;
        s += &format!(
            "{:<14} {:>8} {:>8} {:>8} {:>10} {:>10}\n",
            label,
            f(r.overall.mrr, 1.0),
            f(r.overall.hits1, 1.0),
            f(r.overall.hits10, 1.0),
            f(r.rejection.p_pred_given_ae, 1.0),
            f(r.rejection.p_reject_given_not_ae, 1.0)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(verdict: VerdictKind, rank: Option<usize>, ae: bool) -> LogEntry {
        LogEntry {
            idx: 0,
            query: Query::tail("a", "r"),
            e_known: true,
            r_known: true,
            asked_clue: false,
            asked_fact: false,
            verdict,
            rank,
            ae,
        }
    }

    #[test]
    fn mrr_examples() {
        use Outcome::*;
        assert_eq!(mrr(&[Ranked(1), Ranked(2), Ranked(4)]), Some(7.0 / 12.0));
        assert_eq!(mrr(&[Ranked(1)]), Some(1.0));
        assert_eq!(mrr(&[CorrectRejection, Ranked(2)]), Some(0.5));
        assert_eq!(mrr(&[CorrectRejection]), None);
        assert_eq!(mrr(&[Miss, Ranked(1)]), Some(0.5));
    }

    #[test]
    fn hits_examples() {
        use Outcome::*;
        assert_eq!(hits_at_k(&[Ranked(1), Ranked(12), Ranked(3), Miss], 10), Some(50.0));
        assert_eq!(hits_at_k(&[CorrectRejection, Ranked(1)], 1), Some(100.0));
        assert_eq!(hits_at_k(&[], 1), None);
    }

    #[test]
    fn rejection_examples() {
        let mut log = vec![
            entry(VerdictKind::Answer, Some(1), true),
            entry(VerdictKind::Answer, Some(3), true),
            entry(VerdictKind::Answer, Some(2), true),
            entry(VerdictKind::Reject, Some(1), true),
        ];
        let s = rejection_stats(&log);
        assert_eq!(s.p_pred_given_ae, Some(0.75));
        assert_eq!(s.p_reject_given_not_ae, None);
        log.push(entry(VerdictKind::Reject, None, false));
        log.push(entry(VerdictKind::Unanswerable, None, false));
        assert_eq!(rejection_stats(&log).p_reject_given_not_ae, Some(1.0));
    }

    #[test]
    fn report_partitions_and_bounds() {
        let mut log = Vec::new();
        for i in 0..40 {
            let mut e = entry(
                [VerdictKind::Answer, VerdictKind::Reject, VerdictKind::Unanswerable][i % 3],
                Some(1 + i % 13),
                i % 4 != 0,
            );
            e.idx = i;
            e.e_known = i % 2 == 0;
            e.r_known = i % 5 != 0;
            log.push(e);
        }
        let r = EvalReport::from_log(&log);
        assert_eq!(r.subsets.values().map(|m| m.count).sum::<usize>(), 40);
        assert!(r.overall.hits1.unwrap() <= r.overall.hits10.unwrap());
        assert_eq!(r.verdicts.values().sum::<usize>(), 40);
        assert_eq!(r.over_time.len(), 2);
        assert!(r.over_time[0].overall.count <= r.over_time[1].overall.count);
        let mut buf = Vec::new();
        write_log(&mut buf, &log).unwrap();
        assert_eq!(read_log(&buf[..]).unwrap(), log);
    }

    #[test]
    fn empty_stream_gives_empty_report() {
        let r = EvalReport::from_log(&[]);
        assert_eq!(r.queries, 0);
        assert_eq!(r.overall.mrr, None);
        assert_eq!(r.overall.hits1, None);
    }
}
