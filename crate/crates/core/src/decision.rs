//! Performance and threshold buffers, diffident sets, the per-query
//! prediction threshold and the answer-or-reject decision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kb::{EntityId, KnowledgeBase, RelationId};
use crate::model::{Direction, EmbeddingModel};
use crate::par;

/// A query whose entity and relation are registered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResolvedQuery {
    pub direction: Direction,
    pub entity: EntityId,
    pub relation: RelationId,
}

/// `(q, E⁺, E⁻)`: a validation query with its true answers and sampled non-answers.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationTuple {
    pub query: ResolvedQuery,
    pub positives: Vec<EntityId>,
    pub negatives: Vec<EntityId>,
}

/// Per-tuple quantities needed by both buffers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TupleStats {
    pub reciprocal_rank: f64,
    pub mean_positive: f64,
    /// `None` when the tuple has no negatives.
    pub mean_negative: Option<f64>,
}

/// 1-based raw rank of `target` among all candidates: candidates scoring
/// higher, or equal with a lower id, rank ahead.
pub fn rank_of(scores: &[f64], target: EntityId) -> usize {
    let s = scores[target.index()];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target.index()))
        .count()
}

/// Best-scoring entity of `set` (ties to the lowest id).
pub fn best_of(scores: &[f64], set: &[EntityId]) -> Option<EntityId> {
    set.iter().copied().fold(None, |best, e| match best {
        None => Some(e),
        Some(b) => {
            let (sb, se) = (scores[b.index()], scores[e.index()]);
            if se > sb || (se == sb && e < b) {
                Some(e)
            } else {
                Some(b)
            }
        }
    })
}

fn mean_of(scores: &[f64], set: &[EntityId]) -> Option<f64> {
    if set.is_empty() {
        None
    } else {
        Some(set.iter().map(|e| scores[e.index()]).sum::<f64>() / set.len() as f64)
    }
}

pub fn tuple_stats(model: &EmbeddingModel, tuple: &ValidationTuple) -> TupleStats {
    let q = tuple.query;
    let scores = model.score_all(q.direction, q.entity, q.relation);
    let best = best_of(&scores, &tuple.positives).expect("validation tuple without positives");
    TupleStats {
        reciprocal_rank: 1.0 / rank_of(&scores, best) as f64,
        mean_positive: mean_of(&scores, &tuple.positives).unwrap_or(0.0),
        mean_negative: mean_of(&scores, &tuple.negatives),
    }
}

/// Midpoint threshold over a group of tuples: the average over tuples of
/// `(μ⁺ + μ⁻) / 2`. Tuples without negatives are skipped; `None` if nothing remains.
pub fn compute_threshold<'a>(model: &EmbeddingModel, tuples: impl IntoIterator<Item = &'a ValidationTuple>) -> Option<f64> {
    let stats: Vec<TupleStats> = tuples.into_iter().map(|t| tuple_stats(model, t)).collect();
    threshold_from_stats(stats.iter())
}

fn threshold_from_stats<'a>(stats: impl IntoIterator<Item = &'a TupleStats>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in stats {
        if let Some(neg) = s.mean_negative {
            sum += s.mean_positive + neg;
            n += 1;
        }
    }
    (n > 0).then(|| sum / (2.0 * n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Entity,
    Relation,
}

impl SymbolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SymbolKind::Entity => "entity",
            SymbolKind::Relation => "relation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfEntry {
    pub mean_mrr: f64,
    pub count: u64,
}

/// Running mean of validation MRR per entity and per relation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerformanceBuffer {
    pub entities: BTreeMap<String, PerfEntry>,
    pub relations: BTreeMap<String, PerfEntry>,
}

impl PerformanceBuffer {
    fn map_mut(&mut self, kind: SymbolKind) -> &mut BTreeMap<String, PerfEntry> {
        match kind {
            SymbolKind::Entity => &mut self.entities,
            SymbolKind::Relation => &mut self.relations,
        }
    }

    pub fn map(&self, kind: SymbolKind) -> &BTreeMap<String, PerfEntry> {
        match kind {
            SymbolKind::Entity => &self.entities,
            SymbolKind::Relation => &self.relations,
        }
    }

    pub fn observe(&mut self, kind: SymbolKind, name: &str, mrr: f64) {
        let entry = self
            .map_mut(kind)
            .entry(name.to_owned())
            .or_insert(PerfEntry { mean_mrr: 0.0, count: 0 });
        entry.count += 1;
        entry.mean_mrr += (mrr - entry.mean_mrr) / entry.count as f64;
    }

    pub fn get(&self, kind: SymbolKind, name: &str) -> Option<PerfEntry> {
        self.map(kind).get(name).copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBuffer {
    pub entities: BTreeMap<String, f64>,
    pub relations: BTreeMap<String, f64>,
}

impl ThresholdBuffer {
    pub fn get(&self, kind: SymbolKind, name: &str) -> Option<f64> {
        match kind {
            SymbolKind::Entity => self.entities.get(name).copied(),
            SymbolKind::Relation => self.relations.get(name).copied(),
        }
    }

    pub fn set(&mut self, kind: SymbolKind, name: &str, value: f64) {
        debug_assert!(value.is_finite());
        match kind {
            SymbolKind::Entity => self.entities.insert(name.to_owned(), value),
            SymbolKind::Relation => self.relations.insert(name.to_owned(), value),
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThresholdVariant {
    EntTh,
    RelTh,
    MinTh,
    MaxTh,
}

impl ThresholdVariant {
    pub const ALL: [ThresholdVariant; 4] = [
        ThresholdVariant::EntTh,
        ThresholdVariant::RelTh,
        ThresholdVariant::MinTh,
        ThresholdVariant::MaxTh,
    ];
}

impl fmt::Display for ThresholdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdVariant::EntTh => "EntTh",
            ThresholdVariant::RelTh => "RelTh",
            ThresholdVariant::MinTh => "MinTh",
            ThresholdVariant::MaxTh => "MaxTh",
        })
    }
}

impl FromStr for ThresholdVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "entth" | "ent" => Ok(ThresholdVariant::EntTh),
            "relth" | "rel" => Ok(ThresholdVariant::RelTh),
            "minth" | "min" => Ok(ThresholdVariant::MinTh),
            "maxth" | "max" => Ok(ThresholdVariant::MaxTh),
            _ => Err(format!("unknown threshold variant {s:?}")),
        }
    }
}

/// `μ_q` for a query on entity `e` and relation `r`, never below 0. Absent
/// buffer entries are skipped in both the min and max compositions.
pub fn prediction_threshold(thr: &ThresholdBuffer, e: &str, r: &str, variant: ThresholdVariant) -> f64 {
    let te = thr.get(SymbolKind::Entity, e);
    let tr = thr.get(SymbolKind::Relation, r);
    let combined = match variant {
        ThresholdVariant::EntTh => te,
        ThresholdVariant::RelTh => tr,
        ThresholdVariant::MinTh => match (te, tr) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        },
        ThresholdVariant::MaxTh => match (te, tr) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        },
    };
    combined.map_or(0.0, |v| v.max(0.0))
}

/// Full candidate ranking for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Score of every entity, indexed by id.
    pub scores: Vec<f64>,
    /// Entity ids sorted by descending score, ties by ascending id.
    pub order: Vec<EntityId>,
}

impl Ranking {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<EntityId> = (0..scores.len() as u32).map(EntityId).collect();
        order.sort_by(|a, b| {
            scores[b.index()]
                .total_cmp(&scores[a.index()])
                .then_with(|| a.cmp(b))
        });
        Ranking { scores, order }
    }

    pub fn top(&self) -> Option<(EntityId, f64)> {
        self.order.first().map(|&e| (e, self.scores[e.index()]))
    }

    pub fn rank_of(&self, e: EntityId) -> usize {
        rank_of(&self.scores, e)
    }

    /// Rank of the best-ranked member of `answers`.
    pub fn best_rank(&self, answers: &[EntityId]) -> Option<usize> {
        best_of(&self.scores, answers).map(|b| self.rank_of(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Answer { entity: String, score: f64 },
    Reject { best_entity: String, best_score: f64 },
    Unanswerable { reason: String },
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Answer { .. } => "answer",
            Verdict::Reject { .. } => "reject",
            Verdict::Unanswerable { .. } => "unanswerable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub verdict: Verdict,
    pub ranking: Option<Ranking>,
}

/// Ranks every entity for the query and answers with the top candidate if
/// its score strictly exceeds `threshold`; otherwise rejects.
pub fn decide(
    model: &EmbeddingModel,
    kb: &KnowledgeBase,
    direction: Direction,
    entity: &str,
    relation: &str,
    threshold: f64,
) -> Decision {
    let (Some(e), Some(r)) = (kb.entity_id(entity), kb.relation_id(relation)) else {
        let missing = match (kb.is_entity_known(entity), kb.is_relation_known(relation)) {
            (false, false) => "entity and relation unknown",
            (false, true) => "entity unknown",
            _ => "relation unknown",
        };
        return Decision {
            verdict: Verdict::Unanswerable {
                reason: missing.to_owned(),
            },
            ranking: None,
        };
    };
    let ranking = Ranking::from_scores(model.score_all(direction, e, r));
    let (best, score) = ranking.top().expect("registered entity implies a candidate");
    let name = kb.entity_name(best).to_owned();
    let verdict = if score > threshold {
        Verdict::Answer { entity: name, score }
    } else {
        Verdict::Reject {
            best_entity: name,
            best_score: score,
        }
    };
    Decision {
        verdict,
        ranking: Some(ranking),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BufferUpdate {
    pub tuples: usize,
    pub entity_keys: usize,
    pub relation_keys: usize,
    pub mean_reciprocal_rank: Option<f64>,
}

/// Folds each tuple's reciprocal rank into the running means of its query
/// entity and relation, and overwrites each touched key's threshold with the
/// midpoint computed over this batch.
pub fn update_buffers(
    model: &EmbeddingModel,
    kb: &KnowledgeBase,
    tuples: &[ValidationTuple],
    perf: &mut PerformanceBuffer,
    thr: &mut ThresholdBuffer,
) -> BufferUpdate {
    let stats = par::map_slice(tuples, |t| tuple_stats(model, t));
    let mut groups: BTreeMap<(SymbolKind, &str), Vec<&TupleStats>> = BTreeMap::new();
    for (t, s) in tuples.iter().zip(&stats) {
        let e = kb.entity_name(t.query.entity);
        let r = kb.relation_name(t.query.relation);
        perf.observe(SymbolKind::Entity, e, s.reciprocal_rank);
        perf.observe(SymbolKind::Relation, r, s.reciprocal_rank);
        groups.entry((SymbolKind::Entity, e)).or_default().push(s);
        groups.entry((SymbolKind::Relation, r)).or_default().push(s);
    }
    let mut update = BufferUpdate {
        tuples: tuples.len(),
        ..Default::default()
    };
    for ((kind, name), group) in groups {
        match kind {
            SymbolKind::Entity => update.entity_keys += 1,
            SymbolKind::Relation => update.relation_keys += 1,
        }
        if let Some(value) = threshold_from_stats(group) {
            thr.set(kind, name, value);
        }
    }
    if !stats.is_empty() {
        update.mean_reciprocal_rank = Some(stats.iter().map(|s| s.reciprocal_rank).sum::<f64>() / stats.len() as f64);
    }
    update
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffidentSets {
    pub entities: BTreeSet<String>,
    pub relations: BTreeSet<String>,
}

impl DiffidentSets {
    pub fn contains(&self, kind: SymbolKind, name: &str) -> bool {
        match kind {
            SymbolKind::Entity => self.entities.contains(name),
            SymbolKind::Relation => self.relations.contains(name),
        }
    }
}

/// Number of keys flagged out of `n` at `rho` percent, rounded up.
pub fn diffident_count(n: usize, rho: f64) -> usize {
    let raw = rho.clamp(0.0, 100.0) * n as f64 / 100.0;
    // Guard against 20% of 10 evaluating to 2.0000000000000004.
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Bottom `rho` percent of each kind by mean MRR, ties broken by name.
pub fn diffident_sets(perf: &PerformanceBuffer, rho: f64) -> DiffidentSets {
    let bottom = |map: &BTreeMap<String, PerfEntry>| -> BTreeSet<String> {
        let mut keys: Vec<(&String, f64)> = map.iter().map(|(k, v)| (k, v.mean_mrr)).collect();
        keys.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        keys.into_iter()
            .take(diffident_count(map.len(), rho))
            .map(|(k, _)| k.clone())
            .collect()
    };
    DiffidentSets {
        entities: bottom(&perf.entities),
        relations: bottom(&perf.relations),
    }
}

/// Writes both buffers as `kind<TAB>name<TAB>value<TAB>count` rows: performance
/// rows use kinds `perf_entity`/`perf_relation`, threshold rows
/// `thr_entity`/`thr_relation` with count 0.
pub fn write_buffers<W: Write>(w: &mut W, perf: &PerformanceBuffer, thr: &ThresholdBuffer) -> io::Result<()> {
    for kind in [SymbolKind::Entity, SymbolKind::Relation] {
        for (name, entry) in perf.map(kind) {
            writeln!(w, "perf_{}\t{}\t{:e}\t{}", kind.as_str(), name, entry.mean_mrr, entry.count)?;
        }
    }
    for (kind, map) in [(SymbolKind::Entity, &thr.entities), (SymbolKind::Relation, &thr.relations)] {
        for (name, value) in map {
            writeln!(w, "thr_{}\t{}\t{:e}\t0", kind.as_str(), name, value)?;
        }
    }
    Ok(())
}

pub fn read_buffers<R: BufRead>(r: R) -> io::Result<(PerformanceBuffer, ThresholdBuffer)> {
    let bad = |line: usize, m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("buffers line {line}: {m}"));
    let mut perf = PerformanceBuffer::default();
    let mut thr = ThresholdBuffer::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "expected 4 fields"));
        }
        let value: f64 = f[2].parse().map_err(|_| bad(i + 1, "bad value"))?;
        let count: u64 = f[3].parse().map_err(|_| bad(i + 1, "bad count"))?;
        let name = f[1].to_owned();
        match f[0] {
            "perf_entity" => {
                perf.entities.insert(name, PerfEntry { mean_mrr: value, count });
            }
            "perf_relation" => {
                perf.relations.insert(name, PerfEntry { mean_mrr: value, count });
            }
            "thr_entity" => {
                thr.entities.insert(name, value);
            }
            "thr_relation" => {
                thr.relations.insert(name, value);
            }
            other => return Err(bad(i + 1, &format!("unknown kind {other:?}"))),
        }
    }
    Ok((perf, thr))
}
