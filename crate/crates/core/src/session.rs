//! The per-query dialogue session: decide whether to ask, acquire clues and
//! entity facts, grow and retrain the model, refresh the buffers, then answer
//! or reject.
//!
//! A session is an explicit state machine so the same code drives both the
//! in-process [`UserChannel`] loop and the multi-turn HTTP API, where the
//! engine's questions travel to a remote client between calls.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{
    decide, diffident_sets, prediction_threshold, update_buffers, DiffidentSets, PerformanceBuffer, Ranking,
    ResolvedQuery, SymbolKind, ThresholdBuffer, ThresholdVariant, ValidationTuple, Verdict,
};
use crate::kb::{EntityId, Fact, Insertion, KnowledgeBase, RelationId, Split, SplitMarking, Symbol, Triple};
use crate::model::{Direction, EmbeddingModel, ModelConfig, TrainSummary};

/// A structured WH-query: `(entity, relation, ?)` for [`Direction::Tail`],
/// `(?, relation, entity)` for [`Direction::Head`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub direction: Direction,
    pub entity: String,
    pub relation: String,
}

impl Query {
    pub fn tail(entity: impl Into<String>, relation: impl Into<String>) -> Self {
        Query {
            direction: Direction::Tail,
            entity: entity.into(),
            relation: relation.into(),
        }
    }

    pub fn head(entity: impl Into<String>, relation: impl Into<String>) -> Self {
        Query {
            direction: Direction::Head,
            entity: entity.into(),
            relation: relation.into(),
        }
    }

    /// The triple asserting that `answer` completes this query.
    pub fn completion(&self, answer: &str) -> Fact {
        match self.direction {
            Direction::Tail => Fact::new(self.entity.clone(), self.relation.clone(), answer),
            Direction::Head => Fact::new(answer, self.relation.clone(), self.entity.clone()),
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.direction {
            Direction::Tail => write!(f, "({}, {}, ?)", self.entity, self.relation),
            Direction::Head => write!(f, "(?, {}, {})", self.relation, self.entity),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingStrategy {
    /// Triples involving the query entity and triples involving the query relation.
    BTr,
    /// Only triples involving the query entity.
    EntTr,
    /// Only triples involving the query relation.
    RelTr,
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingStrategy::BTr => "BTr",
            SamplingStrategy::EntTr => "EntTr",
            SamplingStrategy::RelTr => "RelTr",
        })
    }
}

impl FromStr for SamplingStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "btr" | "both" => Ok(SamplingStrategy::BTr),
            "enttr" | "entity" => Ok(SamplingStrategy::EntTr),
            "reltr" | "relation" => Ok(SamplingStrategy::RelTr),
            _ => Err(format!("unknown sampling strategy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    /// Probability that an acquired fact is marked as a training triple.
    pub alpha: f64,
    /// Percentage of buffered entities/relations flagged as diffident.
    pub rho: f64,
    /// Cap on online training triples per session.
    pub max_train: usize,
    /// Validation triples sampled per session.
    pub validation_size: usize,
    pub max_clues: usize,
    pub max_entity_facts: usize,
    pub epochs_closed: usize,
    pub epochs_open: usize,
    pub threshold_variant: ThresholdVariant,
    pub sampling_strategy: SamplingStrategy,
    /// When false, only unknown symbols trigger questions.
    pub use_performance_buffer: bool,
    /// Negative entities per positive in each validation tuple.
    pub validation_negative_ratio: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            alpha: 0.9,
            rho: 20.0,
            max_train: 500,
            validation_size: 50,
            max_clues: 1,
            max_entity_facts: 3,
            epochs_closed: 5,
            epochs_open: 2,
            threshold_variant: ThresholdVariant::MaxTh,
            sampling_strategy: SamplingStrategy::BTr,
            use_performance_buffer: true,
            validation_negative_ratio: 4,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=100.0).contains(&self.rho) {
            return Err(format!("rho must lie in [0, 100], got {}", self.rho));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("user channel closed")]
    Closed,
    #[error("user channel failure: {0}")]
    Failed(String),
}

/// The engine's way of asking a user for supporting facts.
pub trait UserChannel {
    fn clues(&mut self, relation: &str, max_n: usize) -> Result<Vec<Fact>, ChannelError>;
    fn entity_facts(&mut self, entity: &str, max_n: usize) -> Result<Vec<Fact>, ChannelError>;
}

impl<T: UserChannel + ?Sized> UserChannel for &mut T {
    fn clues(&mut self, relation: &str, max_n: usize) -> Result<Vec<Fact>, ChannelError> {
        (**self).clues(relation, max_n)
    }
    fn entity_facts(&mut self, entity: &str, max_n: usize) -> Result<Vec<Fact>, ChannelError> {
        (**self).entity_facts(entity, max_n)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session aborted: {0}")]
    Channel(#[from] ChannelError),
    #[error("invalid supporting facts: {0}")]
    InvalidFacts(String),
    #[error("session is not waiting for facts")]
    NotWaiting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: String,
    pub score: f64,
}

/// One entry of a session transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Started {
        query: Query,
        entity_known: bool,
        relation_known: bool,
    },
    ClueRequest {
        relation: String,
        max_n: usize,
    },
    EntityFactRequest {
        entity: String,
        max_n: usize,
    },
    UserReply {
        facts: Vec<Fact>,
    },
    Inserted {
        added: usize,
        duplicates: usize,
        train: usize,
        valid: usize,
    },
    Grown {
        entities: usize,
        relations: usize,
    },
    Trained {
        triples: usize,
        epochs: usize,
        steps: usize,
        final_hinge: Option<f64>,
    },
    TrainingSkipped,
    Validated {
        tuples: usize,
        mean_reciprocal_rank: Option<f64>,
    },
    ValidationSkipped,
    Decided {
        verdict: Verdict,
        threshold: f64,
        top: Vec<Candidate>,
    },
    Aborted {
        reason: String,
    },
}

/// What the session needs next, or its result.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionState {
    NeedClue { relation: String, max_n: usize },
    NeedEntityFact { entity: String, max_n: usize },
    Done(Box<SessionOutcome>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub index: u64,
    pub query: Query,
    pub verdict: Verdict,
    /// `μ_q` applied; 0 for unanswerable sessions.
    pub threshold: f64,
    pub open_world: bool,
    pub asked_clue: bool,
    pub asked_fact: bool,
    pub transcript: Vec<Event>,
    /// Full candidate ranking, present whenever the query could be scored.
    pub ranking: Option<Ranking>,
    pub training: Option<TrainSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    AwaitClues,
    AwaitFacts,
    Finished,
}

/// An in-flight session. Created by [`Engine::begin`], advanced by [`Engine::supply`].
#[derive(Debug, Clone)]
pub struct Session {
    index: u64,
    query: Query,
    open_world: bool,
    ask_clue: bool,
    ask_fact: bool,
    stage: Stage,
    rng: ChaCha8Rng,
    transcript: Vec<Event>,
}

impl Session {
    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn query(&self) -> &Query {
        &self.query
    }

    pub fn transcript(&self) -> &[Event] {
        &self.transcript
    }

    pub fn is_finished(&self) -> bool {
        self.stage == Stage::Finished
    }
}

/// Engine state: `(𝒦, 𝒫, 𝒯, 𝓜)` plus the diffident sets for the next session.
#[derive(Debug, Clone)]
pub struct Engine {
    pub kb: KnowledgeBase,
    pub model: EmbeddingModel,
    pub perf: PerformanceBuffer,
    pub thr: ThresholdBuffer,
    pub diffident: DiffidentSets,
    pub config: SessionConfig,
    seed: u64,
    sessions: u64,
}

/// Sampled online datasets for one session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Datasets {
    pub train: Vec<Triple>,
    pub validation: Vec<ValidationTuple>,
}

/// Independent deterministic stream for session `index` under `seed`.
pub fn session_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Tuple for the query anchored at `anchor` in `direction`, with every stored
/// answer as a positive and `ratio · |E⁺|` distinct non-answers as negatives.
pub fn validation_tuple<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    direction: Direction,
    anchor: EntityId,
    relation: RelationId,
    ratio: usize,
    rng: &mut R,
) -> ValidationTuple {
    let positives = match direction {
        Direction::Tail => kb.tails_of(anchor, relation),
        Direction::Head => kb.heads_of(relation, anchor),
    };
    let n = kb.num_entities();
    let want = (ratio * positives.len()).min(n - positives.len());
    let excluded: HashSet<EntityId> = positives.iter().copied().collect();
    let negatives = if want == 0 {
        Vec::new()
    } else if 4 * want >= n - positives.len() {
        let pool: Vec<EntityId> = (0..n as u32).map(EntityId).filter(|e| !excluded.contains(e)).collect();
        rand::seq::index::sample(rng, pool.len(), want)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        let mut chosen = Vec::with_capacity(want);
        let mut seen = HashSet::with_capacity(want);
        while chosen.len() < want {
            let e = EntityId(rng.random_range(0..n as u32));
            if !excluded.contains(&e) && seen.insert(e) {
                chosen.push(e);
            }
        }
        chosen
    };
    ValidationTuple {
        query: ResolvedQuery {
            direction,
            entity: anchor,
            relation,
        },
        positives,
        negatives,
    }
}

fn tuple_for_triple<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    t: &Triple,
    around: Option<EntityId>,
    ratio: usize,
    rng: &mut R,
) -> ValidationTuple {
    let direction = match around {
        Some(e) if t.head == e => Direction::Tail,
        Some(_) => Direction::Head,
        None => {
            if rng.random_bool(0.5) {
                Direction::Tail
            } else {
                Direction::Head
            }
        }
    };
    let anchor = match direction {
        Direction::Tail => t.head,
        Direction::Head => t.tail,
    };
    validation_tuple(kb, direction, anchor, t.relation, ratio, rng)
}

/// Splits `cap` between an entity pool and a relation pool: each side gets up
/// to half, and whatever one side cannot use goes to the other.
fn quotas(entity_pool: usize, relation_pool: usize, cap: usize) -> (usize, usize) {
    let half = cap / 2;
    let r = relation_pool.min(cap - entity_pool.min(cap - half));
    let e = entity_pool.min(cap - r);
    (e, r)
}

/// Samples the online training triples and validation tuples for a query on
/// `(entity, relation)` according to `strategy`.
pub fn build_datasets<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    entity: EntityId,
    relation: RelationId,
    strategy: SamplingStrategy,
    cfg: &SessionConfig,
    rng: &mut R,
) -> Datasets {
    let (use_e, use_r) = match strategy {
        SamplingStrategy::BTr => (true, true),
        SamplingStrategy::EntTr => (true, false),
        SamplingStrategy::RelTr => (false, true),
    };
    let pool = |split: Split, wanted: bool, symbol: Symbol| -> usize {
        if wanted {
            kb.triples_involving(symbol).filter(|t| t.split == split).count()
        } else {
            0
        }
    };
    let (es, rs) = (Symbol::Entity(entity), Symbol::Relation(relation));

    let (qe, qr) = quotas(pool(Split::Train, use_e, es), pool(Split::Train, use_r, rs), cfg.max_train);
    let mut train = kb.sample_involving(es, Split::Train, qe, rng);
    let mut seen: HashSet<_> = train.iter().map(Triple::key).collect();
    for t in kb.sample_involving(rs, Split::Train, qr, rng) {
        if seen.insert(t.key()) {
            train.push(t);
        }
    }

    let (ve, vr) = quotas(
        pool(Split::Validation, use_e, es),
        pool(Split::Validation, use_r, rs),
        cfg.validation_size,
    );
    let from_e = kb.sample_involving(es, Split::Validation, ve, rng);
    let mut seen: HashSet<_> = from_e.iter().map(Triple::key).collect();
    let from_r: Vec<Triple> = kb
        .sample_involving(rs, Split::Validation, vr, rng)
        .into_iter()
        .filter(|t| seen.insert(t.key()))
        .collect();
    let ratio = cfg.validation_negative_ratio;
    let mut validation: Vec<ValidationTuple> = from_e
        .iter()
        .map(|t| tuple_for_triple(kb, t, Some(entity), ratio, rng))
        .collect();
    validation.extend(from_r.iter().map(|t| tuple_for_triple(kb, t, None, ratio, rng)));
    Datasets { train, validation }
}

/// True iff the engine should ask about `name`: it is unknown, or the
/// performance buffer is in use and `name` is currently diffident.
pub fn should_ask(
    kind: SymbolKind,
    name: &str,
    kb: &KnowledgeBase,
    diffident: &DiffidentSets,
    use_performance_buffer: bool,
) -> bool {
    let known = match kind {
        SymbolKind::Entity => kb.is_entity_known(name),
        SymbolKind::Relation => kb.is_relation_known(name),
    };
    !known || (use_performance_buffer && diffident.contains(kind, name))
}

/// Parameters of the initial training phase on the base KB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub seed: u64,
}

impl Engine {
    /// Initial training phase: mark `α` of the base triples as train (exact
    /// count), train for `init.epochs`, then seed both buffers from the
    /// validation triples, each queried in both directions.
    pub fn initial_training(mut kb: KnowledgeBase, init: InitConfig, config: SessionConfig) -> Engine {
        let mut rng = session_rng(init.seed, u64::MAX - 1);
        let marks = SplitMarking::Exact { alpha: config.alpha }.marks(kb.len(), &mut rng);
        let keys: Vec<_> = kb.triples().iter().map(Triple::key).collect();
        for (key, split) in keys.into_iter().zip(marks) {
            kb.set_split(key, split);
        }
        let mut model = EmbeddingModel::new(init.model, init.seed);
        model.sync_with(&kb, &mut rng);
        let train: Vec<Triple> = kb.triples().iter().filter(|t| t.split == Split::Train).copied().collect();
        let summary = model.train(&kb, &train, init.epochs, &mut rng);
        if let Some(h) = summary.final_hinge() {
            log::info!("initial training: {} triples, {} epochs, final hinge {h:.4}", train.len(), init.epochs);
        }

        let mut tuples = Vec::new();
        for t in kb.triples().iter().filter(|t| t.split == Split::Validation) {
            for (direction, anchor) in [(Direction::Tail, t.head), (Direction::Head, t.tail)] {
                tuples.push(validation_tuple(
                    &kb,
                    direction,
                    anchor,
                    t.relation,
                    config.validation_negative_ratio,
                    &mut rng,
                ));
            }
        }
        let mut perf = PerformanceBuffer::default();
        let mut thr = ThresholdBuffer::default();
        update_buffers(&model, &kb, &tuples, &mut perf, &mut thr);
        let diffident = diffident_sets(&perf, config.rho);
        Engine {
            kb,
            model,
            perf,
            thr,
            diffident,
            config,
            seed: init.seed,
            sessions: 0,
        }
    }

    /// Reassembles an engine from persisted parts.
    pub fn from_parts(
        kb: KnowledgeBase,
        model: EmbeddingModel,
        perf: PerformanceBuffer,
        thr: ThresholdBuffer,
        config: SessionConfig,
        seed: u64,
        sessions: u64,
    ) -> Engine {
        let diffident = diffident_sets(&perf, config.rho);
        Engine {
            kb,
            model,
            perf,
            thr,
            diffident,
            config,
            seed,
            sessions,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces the session config; diffident sets follow the new `ρ`.
    pub fn set_config(&mut self, config: SessionConfig) {
        self.config = config;
        self.diffident = diffident_sets(&self.perf, config.rho);
    }

    /// Sessions started so far; the next session gets this index.
    pub fn sessions(&self) -> u64 {
        self.sessions
    }

    /// Opens a session for `query`. Returns the first question, or the
    /// outcome directly when nothing needs to be asked.
    pub fn begin(&mut self, query: Query) -> (Session, SessionState) {
        let index = self.sessions;
        self.sessions += 1;
        let entity_known = self.kb.is_entity_known(&query.entity);
        let relation_known = self.kb.is_relation_known(&query.relation);
        let use_perf = self.config.use_performance_buffer;
        let ask_clue = should_ask(SymbolKind::Relation, &query.relation, &self.kb, &self.diffident, use_perf);
        let ask_fact = should_ask(SymbolKind::Entity, &query.entity, &self.kb, &self.diffident, use_perf);
        let mut session = Session {
            index,
            open_world: !(entity_known && relation_known),
            ask_clue,
            ask_fact,
            stage: Stage::AwaitClues,
            rng: session_rng(self.seed, index),
            transcript: vec![Event::Started {
                query: query.clone(),
                entity_known,
                relation_known,
            }],
            query,
        };
        let state = self.advance(&mut session);
        (session, state)
    }

    /// Supplies the user's reply to the pending request.
    pub fn supply(&mut self, session: &mut Session, facts: Vec<Fact>) -> Result<SessionState, SessionError> {
        let q = &session.query;
        let (max_n, on_topic): (usize, fn(&Fact, &Query) -> bool) = match session.stage {
            Stage::AwaitClues => (self.config.max_clues, |f: &Fact, q: &Query| f.relation == q.relation),
            Stage::AwaitFacts => (self.config.max_entity_facts, |f: &Fact, q: &Query| f.mentions_entity(&q.entity)),
            Stage::Finished => return Err(SessionError::NotWaiting),
        };
        if facts.len() > max_n {
            return Err(SessionError::InvalidFacts(format!(
                "{} facts supplied, at most {max_n} requested",
                facts.len()
            )));
        }
        if let Some(bad) = facts.iter().find(|f| !on_topic(f, q)) {
            let what = if session.stage == Stage::AwaitClues {
                format!("clue {bad} does not contain relation {}", session.query.relation)
            } else {
                format!("entity fact {bad} does not contain entity {}", session.query.entity)
            };
            return Err(SessionError::InvalidFacts(what));
        }
        if let Some(bad) = facts.iter().find(|f| f.head.is_empty() || f.relation.is_empty() || f.tail.is_empty()) {
            return Err(SessionError::InvalidFacts(format!("malformed triple {bad}")));
        }
        session.transcript.push(Event::UserReply { facts: facts.clone() });
        self.insert(session, &facts);
        session.stage = match session.stage {
            Stage::AwaitClues => Stage::AwaitFacts,
            _ => Stage::Finished,
        };
        Ok(self.advance(session))
    }

    /// Marks the session aborted; already inserted facts stay in the KB.
    pub fn abort(&mut self, session: &mut Session, reason: &str) {
        session.transcript.push(Event::Aborted {
            reason: reason.to_owned(),
        });
        session.stage = Stage::Finished;
    }

    /// Runs a whole session against an in-process user.
    pub fn process_query<U: UserChannel + ?Sized>(
        &mut self,
        query: Query,
        user: &mut U,
    ) -> Result<SessionOutcome, SessionError> {
        let (mut session, mut state) = self.begin(query);
        loop {
            let reply = match &state {
                SessionState::Done(outcome) => return Ok((**outcome).clone()),
                SessionState::NeedClue { relation, max_n } => user.clues(relation, *max_n),
                SessionState::NeedEntityFact { entity, max_n } => user.entity_facts(entity, *max_n),
            };
            match reply {
                Ok(facts) => state = self.supply(&mut session, facts)?,
                Err(e) => {
                    self.abort(&mut session, &e.to_string());
                    return Err(e.into());
                }
            }
        }
    }

    fn insert(&mut self, session: &mut Session, facts: &[Fact]) {
        let marks = SplitMarking::Bernoulli { alpha: self.config.alpha }.marks(facts.len(), &mut session.rng);
        let (mut added, mut duplicates, mut train, mut valid) = (0, 0, 0, 0);
        for (fact, split) in facts.iter().zip(marks) {
            match self.kb.add_fact(fact, split) {
                Ok(Insertion::Added) => {
                    added += 1;
                    match split {
                        Split::Train => train += 1,
                        Split::Validation => valid += 1,
                    }
                }
                Ok(Insertion::Duplicate) => duplicates += 1,
                Err(e) => log::warn!("dropping supporting fact {fact}: {e}"),
            }
        }
        session.transcript.push(Event::Inserted {
            added,
            duplicates,
            train,
            valid,
        });
    }

    fn advance(&mut self, session: &mut Session) -> SessionState {
        if session.stage == Stage::AwaitClues {
            if session.ask_clue {
                let (relation, max_n) = (session.query.relation.clone(), self.config.max_clues);
                session.transcript.push(Event::ClueRequest {
                    relation: relation.clone(),
                    max_n,
                });
                return SessionState::NeedClue { relation, max_n };
            }
            session.stage = Stage::AwaitFacts;
        }
        if session.stage == Stage::AwaitFacts {
            if session.ask_fact {
                let (entity, max_n) = (session.query.entity.clone(), self.config.max_entity_facts);
                session.transcript.push(Event::EntityFactRequest {
                    entity: entity.clone(),
                    max_n,
                });
                // Leave the stage so `supply` validates against the entity.
                session.ask_fact = false;
                session.ask_clue = false;
                return SessionState::NeedEntityFact { entity, max_n };
            }
            session.stage = Stage::Finished;
        }
        SessionState::Done(Box::new(self.finish(session)))
    }

    fn finish(&mut self, session: &mut Session) -> SessionOutcome {
        let rng = &mut session.rng;
        let (ne, nr) = self.model.sync_with(&self.kb, rng);
        if ne + nr > 0 {
            session.transcript.push(Event::Grown {
                entities: ne,
                relations: nr,
            });
        }
        let asked_clue = session
            .transcript
            .iter()
            .any(|e| matches!(e, Event::ClueRequest { .. }));
        let asked_fact = session
            .transcript
            .iter()
            .any(|e| matches!(e, Event::EntityFactRequest { .. }));
        let q = session.query.clone();
        let mut training = None;
        let (verdict, threshold, ranking) = match (self.kb.entity_id(&q.entity), self.kb.relation_id(&q.relation)) {
            (Some(e), Some(r)) => {
                let data = build_datasets(&self.kb, e, r, self.config.sampling_strategy, &self.config, rng);
                if data.train.is_empty() {
                    session.transcript.push(Event::TrainingSkipped);
                } else {
                    let epochs = if session.open_world {
                        self.config.epochs_open
                    } else {
                        self.config.epochs_closed
                    };
                    let summary = self.model.train(&self.kb, &data.train, epochs, rng);
                    session.transcript.push(Event::Trained {
                        triples: summary.triples,
                        epochs: summary.epochs,
                        steps: summary.steps,
                        final_hinge: summary.final_hinge(),
                    });
                    training = Some(summary);
                }
                if data.validation.is_empty() {
                    session.transcript.push(Event::ValidationSkipped);
                } else {
                    let upd = update_buffers(&self.model, &self.kb, &data.validation, &mut self.perf, &mut self.thr);
                    session.transcript.push(Event::Validated {
                        tuples: upd.tuples,
                        mean_reciprocal_rank: upd.mean_reciprocal_rank,
                    });
                }
                let mu = prediction_threshold(&self.thr, &q.entity, &q.relation, self.config.threshold_variant);
                let decision = decide(&self.model, &self.kb, q.direction, &q.entity, &q.relation, mu);
                (decision.verdict, mu, decision.ranking)
            }
            _ => {
                let d = decide(&self.model, &self.kb, q.direction, &q.entity, &q.relation, 0.0);
                (d.verdict, 0.0, None)
            }
        };
        let top = ranking
            .as_ref()
            .map(|r| {
                r.order
                    .iter()
                    .take(10)
                    .map(|&e| Candidate {
                        entity: self.kb.entity_name(e).to_owned(),
                        score: r.scores[e.index()],
                    })
                    .collect()
            })
            .unwrap_or_default();
        session.transcript.push(Event::Decided {
            verdict: verdict.clone(),
            threshold,
            top,
        });
        self.diffident = diffident_sets(&self.perf, self.config.rho);
        session.stage = Stage::Finished;
        SessionOutcome {
            index: session.index,
            query: q,
            verdict,
            threshold,
            open_world: session.open_world,
            asked_clue,
            asked_fact,
            transcript: session.transcript.clone(),
            ranking,
            training,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted {
        clues: Vec<Fact>,
        facts: Vec<Fact>,
        calls: Vec<String>,
    }

    impl UserChannel for Scripted {
        fn clues(&mut self, relation: &str, max_n: usize) -> Result<Vec<Fact>, ChannelError> {
            self.calls.push(format!("clue {relation} {max_n}"));
            Ok(self.clues.iter().filter(|f| f.relation == relation).take(max_n).cloned().collect())
        }
        fn entity_facts(&mut self, entity: &str, max_n: usize) -> Result<Vec<Fact>, ChannelError> {
            self.calls.push(format!("fact {entity} {max_n}"));
            Ok(self.facts.iter().filter(|f| f.mentions_entity(entity)).take(max_n).cloned().collect())
        }
    }

    struct Broken;
    impl UserChannel for Broken {
        fn clues(&mut self, _: &str, _: usize) -> Result<Vec<Fact>, ChannelError> {
            Err(ChannelError::Closed)
        }
        fn entity_facts(&mut self, _: &str, _: usize) -> Result<Vec<Fact>, ChannelError> {
            Err(ChannelError::Closed)
        }
    }

    fn base_kb() -> KnowledgeBase {
        let mut kb = KnowledgeBase::new();
        for i in 0..12 {
            let rel = ["r0", "r1", "r2"][i % 3];
            kb.add_fact(&Fact::new(format!("e{i}"), rel, format!("e{}", (i + 1) % 12)), Split::Train)
                .unwrap();
            kb.add_fact(&Fact::new(format!("e{i}"), "r1", format!("e{}", (i + 5) % 12)), Split::Train)
                .unwrap();
        }
        kb
    }

    fn engine(config: SessionConfig) -> Engine {
        let init = InitConfig {
            model: ModelConfig {
                dim: 8,
                ..ModelConfig::default()
            },
            epochs: 3,
            seed: 5,
        };
        Engine::initial_training(base_kb(), init, config)
    }

    #[test]
    fn quotas_split_and_refill() {
        assert_eq!(quotas(1000, 1000, 500), (250, 250));
        assert_eq!(quotas(10, 1000, 500), (10, 490));
        assert_eq!(quotas(1000, 10, 500), (490, 10));
        assert_eq!(quotas(3, 4, 500), (3, 4));
        assert_eq!(quotas(0, 0, 500), (0, 0));
        assert_eq!(quotas(7, 7, 5), (3, 2));
    }

    #[test]
    fn initial_training_marks_exact_split_and_fills_buffers() {
        let e = engine(SessionConfig::default());
        let (train, valid) = e.kb.split_counts();
        assert_eq!(train + valid, 24);
        assert_eq!(valid, 24 - (0.9f64 * 24.0).round() as usize);
        assert!(!e.perf.map(SymbolKind::Relation).is_empty());
        assert_eq!(e.model.num_entities(), 12);
    }

    #[test]
    fn open_world_session_asks_for_both_and_answers() {
        let mut e = engine(SessionConfig::default());
        let mut user = Scripted {
            clues: vec![Fact::new("e0", "r9", "e3")],
            facts: vec![Fact::new("new", "r0", "e1"), Fact::new("e2", "r1", "new"), Fact::new("new", "r9", "e4")],
            calls: vec![],
        };
        let out = e.process_query(Query::tail("new", "r9"), &mut user).unwrap();
        assert_eq!(user.calls, vec!["clue r9 1", "fact new 3"]);
        assert!(out.open_world && out.asked_clue && out.asked_fact);
        assert!(e.kb.is_entity_known("new") && e.kb.is_relation_known("r9"));
        assert_eq!(e.model.num_entities(), 13);
        assert!(matches!(out.verdict, Verdict::Answer { .. } | Verdict::Reject { .. }));
        assert_eq!(out.ranking.as_ref().unwrap().order.len(), 13);
        assert!(out.transcript.iter().any(|ev| matches!(ev, Event::Trained { epochs: 2, .. })));
        assert_eq!(e.sessions(), 1);
    }

    #[test]
    fn missing_symbol_after_acquisition_is_unanswerable() {
        let mut e = engine(SessionConfig::default());
        let mut user = Scripted {
            clues: vec![],
            facts: vec![],
            calls: vec![],
        };
        let before = e.model.clone();
        let out = e.process_query(Query::head("ghost", "r0"), &mut user).unwrap();
        assert!(matches!(out.verdict, Verdict::Unanswerable { .. }));
        assert!(out.ranking.is_none());
        assert_eq!(e.model.entity_table(), before.entity_table());
    }

    #[test]
    fn known_symbols_without_buffer_skip_questions() {
        let mut e = engine(SessionConfig {
            use_performance_buffer: false,
            ..SessionConfig::default()
        });
        let (_, state) = e.begin(Query::tail("e0", "r0"));
        let SessionState::Done(out) = state else { panic!("expected no questions") };
        assert!(!out.open_world && !out.asked_clue && !out.asked_fact);
        assert!(out.transcript.iter().any(|ev| matches!(ev, Event::Trained { epochs: 5, .. })));
    }

    #[test]
    fn supply_rejects_off_topic_or_excess_facts() {
        let mut e = engine(SessionConfig::default());
        let (mut s, state) = e.begin(Query::tail("new", "r9"));
        assert_eq!(
            state,
            SessionState::NeedClue {
                relation: "r9".into(),
                max_n: 1
            }
        );
        let err = e.supply(&mut s, vec![Fact::new("a", "r0", "b")]).unwrap_err();
        assert!(matches!(err, SessionError::InvalidFacts(_)));
        let err = e
            .supply(&mut s, vec![Fact::new("a", "r9", "b"), Fact::new("c", "r9", "d")])
            .unwrap_err();
        assert!(matches!(err, SessionError::InvalidFacts(_)));
        let next = e.supply(&mut s, vec![Fact::new("a", "r9", "b")]).unwrap();
        assert!(matches!(next, SessionState::NeedEntityFact { .. }));
        assert!(e.kb.contains_fact(&Fact::new("a", "r9", "b")), "clues are inserted on receipt");
        let err = e.supply(&mut s, vec![Fact::new("a", "r9", "b")]).unwrap_err();
        assert!(matches!(err, SessionError::InvalidFacts(_)));
        let done = e.supply(&mut s, vec![]).unwrap();
        assert!(matches!(done, SessionState::Done(_)));
        assert!(matches!(e.supply(&mut s, vec![]), Err(SessionError::NotWaiting)));
    }

    #[test]
    fn channel_failure_aborts_session() {
        let mut e = engine(SessionConfig::default());
        let err = e.process_query(Query::tail("new", "r9"), &mut Broken).unwrap_err();
        assert!(matches!(err, SessionError::Channel(ChannelError::Closed)));
        assert_eq!(e.sessions(), 1);
    }

    #[test]
    fn sessions_are_deterministic() {
        let run = || {
            let mut e = engine(SessionConfig::default());
            let mut user = Scripted {
                clues: vec![Fact::new("e0", "r9", "e3")],
                facts: vec![Fact::new("new", "r0", "e1")],
                calls: vec![],
            };
            let a = e.process_query(Query::tail("new", "r9"), &mut user).unwrap();
            let b = e.process_query(Query::head("e4", "r1"), &mut user).unwrap();
            serde_json::to_string(&(a.transcript, b.transcript)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn datasets_respect_caps_and_strategies() {
        let e = engine(SessionConfig::default());
        let (ent, rel) = (e.kb.entity_id("e0").unwrap(), e.kb.relation_id("r1").unwrap());
        let cfg = SessionConfig {
            max_train: 4,
            validation_size: 2,
            ..SessionConfig::default()
        };
        let mut rng = session_rng(1, 0);
        let d = build_datasets(&e.kb, ent, rel, SamplingStrategy::BTr, &cfg, &mut rng);
        assert!(d.train.len() <= 4 && d.validation.len() <= 2);
        assert!(d.train.iter().all(|t| t.split == Split::Train && (t.contains_entity(ent) || t.relation == rel)));
        let d = build_datasets(&e.kb, ent, rel, SamplingStrategy::EntTr, &SessionConfig::default(), &mut rng);
        assert!(d.train.iter().all(|t| t.contains_entity(ent)));
        let d = build_datasets(&e.kb, ent, rel, SamplingStrategy::RelTr, &SessionConfig::default(), &mut rng);
        assert!(d.train.iter().all(|t| t.relation == rel));
        for tuple in &d.validation {
            assert_eq!(tuple.negatives.len(), (4 * tuple.positives.len()).min(12 - tuple.positives.len()));
            assert!(tuple.negatives.iter().all(|n| !tuple.positives.contains(n)));
        }
    }

    #[test]
    fn validation_tuple_negatives_are_distinct_non_answers() {
        let mut kb = KnowledgeBase::new();
        for i in 0..200 {
            kb.add_fact(&Fact::new("hub", "r", format!("t{i}")), Split::Train).unwrap();
        }
        for i in 0..2000 {
            kb.add_fact(&Fact::new(format!("x{i}"), "s", "y"), Split::Train).unwrap();
        }
        let (h, r) = (kb.entity_id("hub").unwrap(), kb.relation_id("r").unwrap());
        let tuple = validation_tuple(&kb, Direction::Tail, h, r, 4, &mut session_rng(0, 0));
        assert_eq!(tuple.positives.len(), 200);
        assert_eq!(tuple.negatives.len(), 800);
        let set: HashSet<_> = tuple.negatives.iter().collect();
        assert_eq!(set.len(), 800);
        assert!(tuple.negatives.iter().all(|n| !tuple.positives.contains(n)));
    }
}
