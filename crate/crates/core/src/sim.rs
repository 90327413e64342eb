//! Evaluation world: splits an original KB into the engine's base KB, a
//! simulated user's KB and a query stream, and answers the engine's requests
//! from the user's KB.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{sample_subset, EntityId, Fact, KbError, KnowledgeBase, RelationId, Split, Triple};
use crate::model::Direction;
use crate::session::{ChannelError, Query, UserChannel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldBuildConfig {
    /// Test relations drawn from the eligible ones; `None` takes all of them.
    pub n_test_relations: Option<usize>,
    pub unknown_relation_fraction: f64,
    pub per_relation_cap: usize,
    pub test_fraction: f64,
    pub unknown_entity_fraction: f64,
    pub min_triples_per_relation: usize,
    /// Share of a known test relation's non-query triples handed to the user.
    pub user_share: f64,
    pub seed: u64,
}

impl Default for WorldBuildConfig {
    fn default() -> Self {
        Self::wordnet(0)
    }
}

impl WorldBuildConfig {
    pub fn wordnet(seed: u64) -> Self {
        WorldBuildConfig {
            n_test_relations: None,
            unknown_relation_fraction: 0.34,
            per_relation_cap: 250,
            test_fraction: 0.2,
            unknown_entity_fraction: 0.2,
            min_triples_per_relation: 0,
            user_share: 0.5,
            seed,
        }
    }

    pub fn nell(seed: u64) -> Self {
        WorldBuildConfig {
            n_test_relations: Some(25),
            min_triples_per_relation: 300,
            ..Self::wordnet(seed)
        }
    }

    fn validate(&self) -> Result<(), WorldError> {
        for (name, v) in [
            ("unknown_relation_fraction", self.unknown_relation_fraction),
            ("test_fraction", self.test_fraction),
            ("unknown_entity_fraction", self.unknown_entity_fraction),
            ("user_share", self.user_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(WorldError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("original KB too small: {0}")]
    TooSmall(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{0}: {1}")]
    Io(String, io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldQuery {
    pub query: Query,
    /// Every entity completing the query in the original KB, sorted.
    pub answers: Vec<String>,
    pub e_known: bool,
    pub r_known: bool,
}

impl WorldQuery {
    pub fn is_open_world(&self) -> bool {
        !(self.e_known && self.r_known)
    }
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    pub config: WorldBuildConfig,
    pub kb_base: KnowledgeBase,
    pub kb_user: KnowledgeBase,
    pub queries: Vec<WorldQuery>,
    pub test_relations: Vec<String>,
    pub unknown_relations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dest {
    Base,
    User,
    Dropped,
}

fn completes(query: &Query, fact: &Fact) -> bool {
    fact.relation == query.relation
        && match query.direction {
            Direction::Tail => fact.head == query.entity,
            Direction::Head => fact.tail == query.entity,
        }
}

/// Builds the evaluation world from `original`.
pub fn build_world(original: &KnowledgeBase, cfg: &WorldBuildConfig) -> Result<SimWorld, WorldError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut relations: Vec<RelationId> = (0..original.num_relations() as u32)
        .map(RelationId)
        .filter(|&r| original.triples_of_relation(r).count() >= cfg.min_triples_per_relation.max(1))
        .collect();
    relations.sort_by(|a, b| original.relation_name(*a).cmp(original.relation_name(*b)));
    let n_test = cfg.n_test_relations.unwrap_or(relations.len());
    if n_test == 0 || n_test > relations.len() {
        return Err(WorldError::TooSmall(format!(
            "{n_test} test relations requested, {} relations have at least {} triples",
            relations.len(),
            cfg.min_triples_per_relation
        )));
    }
    let test = sample_subset(relations, n_test, &mut rng);
    let n_unknown = (cfg.unknown_relation_fraction * n_test as f64 + 1e-9).floor() as usize;
    let unknown = sample_subset(test.clone(), n_unknown, &mut rng);

    let position: std::collections::HashMap<_, usize> =
        original.triples().iter().enumerate().map(|(i, t)| (t.key(), i)).collect();
    let mut dest = vec![Dest::Base; original.len()];
    let mut query_triples: Vec<Triple> = Vec::new();
    for &r in &test {
        let is_unknown = unknown.contains(&r);
        let mut pool: Vec<Triple> = original.triples_of_relation(r).copied().collect();
        pool.shuffle(&mut rng);
        let cap = pool.len().min(cfg.per_relation_cap);
        let n_query = ((cfg.test_fraction * cap as f64).round() as usize).clamp(1, cap);
        let rest = cap - n_query;
        let n_user = (cfg.user_share * rest as f64).round() as usize;
        for (i, t) in pool.iter().enumerate() {
            let d = if i < n_query {
                query_triples.push(*t);
                Dest::Dropped
            } else if is_unknown || i < n_query + n_user {
                Dest::User
            } else {
                Dest::Base
            };
            dest[position[&t.key()]] = d;
        }
    }

    // Hide a fraction of the entities taking part in query triples: their
    // remaining base triples go to the user.
    let mut in_queries: Vec<EntityId> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in &query_triples {
        for e in [t.head, t.tail] {
            if seen.insert(e) {
                in_queries.push(e);
            }
        }
    }
    let n_hidden = (cfg.unknown_entity_fraction * in_queries.len() as f64).round() as usize;
    for e in sample_subset(in_queries, n_hidden, &mut rng) {
        for t in original.triples_of_entity(e) {
            let i = position[&t.key()];
            if dest[i] == Dest::Base {
                dest[i] = Dest::User;
            }
        }
    }

    let mut queries: Vec<WorldQuery> = Vec::with_capacity(query_triples.len());
    for t in &query_triples {
        let relation = original.relation_name(t.relation);
        let (query, answers) = if rng.random_bool(0.5) {
            (Query::tail(original.entity_name(t.head), relation), original.tails_of(t.head, t.relation))
        } else {
            (Query::head(original.entity_name(t.tail), relation), original.heads_of(t.relation, t.tail))
        };
        let mut answers: Vec<String> = answers.iter().map(|&e| original.entity_name(e).to_owned()).collect();
        answers.sort();
        queries.push(WorldQuery {
            query,
            answers,
            e_known: false,
            r_known: false,
        });
    }
    // No query completion may stay in either KB.
    for q in &queries {
        let anchor = original.entity_id(&q.query.entity).expect("query entity comes from the original KB");
        let r = original.relation_id(&q.query.relation).expect("query relation comes from the original KB");
        let completions: Vec<Triple> = original
            .triples_of_relation(r)
            .filter(|t| match q.query.direction {
                Direction::Tail => t.head == anchor,
                Direction::Head => t.tail == anchor,
            })
            .copied()
            .collect();
        for t in completions {
            dest[position[&t.key()]] = Dest::Dropped;
        }
    }

    let mut kb_base = KnowledgeBase::new();
    let mut kb_user = KnowledgeBase::new();
    for (t, d) in original.triples().iter().zip(&dest) {
        let fact = original.fact(t);
        match d {
            Dest::Base => kb_base.add_fact(&fact, Split::Train)?,
            Dest::User => kb_user.add_fact(&fact, Split::Train)?,
            Dest::Dropped => continue,
        };
    }
    if kb_base.is_empty() {
        return Err(WorldError::TooSmall("base KB would be empty".into()));
    }
    for q in &mut queries {
        q.e_known = kb_base.is_entity_known(&q.query.entity);
        q.r_known = kb_base.is_relation_known(&q.query.relation);
    }
    let names = |rs: &[RelationId]| -> Vec<String> {
        let mut v: Vec<String> = rs.iter().map(|&r| original.relation_name(r).to_owned()).collect();
        v.sort();
        v
    };
    Ok(SimWorld {
        config: cfg.clone(),
        kb_base,
        kb_user,
        queries,
        test_relations: names(&test),
        unknown_relations: names(&unknown),
    })
}

impl SimWorld {
    /// Up to `max_n` user triples with `relation`, uniformly drawn, none completing `pending`.
    pub fn answer_clue_request<R: Rng + ?Sized>(
        &self,
        relation: &str,
        max_n: usize,
        pending: &Query,
        rng: &mut R,
    ) -> Vec<Fact> {
        let Some(r) = self.kb_user.relation_id(relation) else {
            return Vec::new();
        };
        let pool: Vec<Fact> = self
            .kb_user
            .triples_of_relation(r)
            .map(|t| self.kb_user.fact(t))
            .filter(|f| !completes(pending, f))
            .collect();
        sample_subset(pool, max_n, rng)
    }

    /// Up to `max_n` user triples mentioning `entity`, uniformly drawn, none completing `pending`.
    pub fn answer_entity_fact_request<R: Rng + ?Sized>(
        &self,
        entity: &str,
        max_n: usize,
        pending: &Query,
        rng: &mut R,
    ) -> Vec<Fact> {
        let Some(e) = self.kb_user.entity_id(entity) else {
            return Vec::new();
        };
        let pool: Vec<Fact> = self
            .kb_user
            .triples_of_entity(e)
            .map(|t| self.kb_user.fact(t))
            .filter(|f| !completes(pending, f))
            .collect();
        sample_subset(pool, max_n, rng)
    }

    /// Query-flag proportions `(only e unknown, only r unknown, both unknown)`.
    pub fn flag_proportions(&self) -> (f64, f64, f64) {
        let n = self.queries.len().max(1) as f64;
        let count = |f: &dyn Fn(&WorldQuery) -> bool| self.queries.iter().filter(|q| f(q)).count() as f64 / n;
        (
            count(&|q| !q.e_known && q.r_known),
            count(&|q| q.e_known && !q.r_known),
            count(&|q| !q.e_known && !q.r_known),
        )
    }

    pub fn summary(&self) -> String {
        let (oe, or, both) = self.flag_proportions();
        format!(
            "base KB: {} relations, {} entities, {} triples\n\
             user KB: {} relations, {} entities, {} triples\n\
             queries: {} over {} test relations ({} unknown)\n\
             only e unknown {:.2}%, only r unknown {:.2}%, both unknown {:.2}%",
            self.kb_base.num_relations(),
            self.kb_base.num_entities(),
            self.kb_base.len(),
            self.kb_user.num_relations(),
            self.kb_user.num_entities(),
            self.kb_user.len(),
            self.queries.len(),
            self.test_relations.len(),
            self.unknown_relations.len(),
            100.0 * oe,
            100.0 * or,
            100.0 * both,
        )
    }

    /// Writes `base_kb.tsv`, `user_kb.tsv`, `queries.tsv` and `world.meta` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), WorldError> {
        let io_err = |p: &Path| {
            let p = p.display().to_string();
            move |e| WorldError::Io(p, e)
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.kb_base.save(&dir.join("base_kb.tsv"))?;
        self.kb_user.save(&dir.join("user_kb.tsv"))?;
        let qpath = dir.join("queries.tsv");
        let file = fs::File::create(&qpath).map_err(io_err(&qpath))?;
        let mut w = BufWriter::new(file);
        write_queries(&mut w, &self.queries).map_err(io_err(&qpath))?;
        w.flush().map_err(io_err(&qpath))?;
        let meta = WorldMeta {
            v: 1,
            config: self.config.clone(),
            test_relations: self.test_relations.clone(),
            unknown_relations: self.unknown_relations.clone(),
        };
        let mpath = dir.join("world.meta");
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
        fs::write(&mpath, text).map_err(io_err(&mpath))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SimWorld, WorldError> {
        let mpath = dir.join("world.meta");
        let text = fs::read_to_string(&mpath).map_err(|e| WorldError::Io(mpath.display().to_string(), e))?;
        let meta: WorldMeta = serde_json::from_str(&text).map_err(|e| WorldError::Parse {
            path: mpath.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let qpath = dir.join("queries.tsv");
        let file = fs::File::open(&qpath).map_err(|e| WorldError::Io(qpath.display().to_string(), e))?;
        let queries = read_queries(BufReader::new(file)).map_err(|(line, message)| WorldError::Parse {
            path: qpath.display().to_string(),
            line,
            message,
        })?;
        Ok(SimWorld {
            config: meta.config,
            kb_base: KnowledgeBase::load(&dir.join("base_kb.tsv"))?,
            kb_user: KnowledgeBase::load(&dir.join("user_kb.tsv"))?,
            queries,
            test_relations: meta.test_relations,
            unknown_relations: meta.unknown_relations,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldMeta {
    v: u32,
    config: WorldBuildConfig,
    test_relations: Vec<String>,
    unknown_relations: Vec<String>,
}

fn direction_str(d: Direction) -> &'static str {
    match d {
        Direction::Head => "head",
        Direction::Tail => "tail",
    }
}

pub fn write_queries<W: Write>(w: &mut W, queries: &[WorldQuery]) -> io::Result<()> {
    writeln!(w, "# direction\tentity\trelation\tanswers\te_known\tr_known")?;
    for q in queries {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            direction_str(q.query.direction),
            q.query.entity,
            q.query.relation,
            q.answers.join("|"),
            q.e_known as u8,
            q.r_known as u8
        )?;
    }
    Ok(())
}

pub fn read_queries<R: BufRead>(r: R) -> Result<Vec<WorldQuery>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| (i + 1, e.to_string()))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err((i + 1, format!("expected 6 columns, found {}", cols.len())));
        }
        let direction = match cols[0] {
            "head" => Direction::Head,
            "tail" => Direction::Tail,
            other => return Err((i + 1, format!("bad direction {other:?}"))),
        };
        let flag = |s: &str| match s {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err((i + 1, format!("bad flag {other:?}"))),
        };
        out.push(WorldQuery {
            query: Query {
                direction,
                entity: cols[1].to_owned(),
                relation: cols[2].to_owned(),
            },
            answers: cols[3].split('|').filter(|s| !s.is_empty()).map(str::to_owned).collect(),
            e_known: flag(cols[4])?,
            r_known: flag(cols[5])?,
        });
    }
    Ok(out)
}

/// The simulated user for one pending query.
pub struct SimulatedUser<'w, R: Rng> {
    world: &'w SimWorld,
    pending: Query,
    rng: R,
}

impl<'w, R: Rng> SimulatedUser<'w, R> {
    pub fn new(world: &'w SimWorld, pending: Query, rng: R) -> Self {
        SimulatedUser { world, pending, rng }
    }
}

impl<R: Rng> UserChannel for SimulatedUser<'_, R> {
    fn clues(&mut self, relation: &str, max_n: usize) -> Result<Vec<Fact>, ChannelError> {
        Ok(self.world.answer_clue_request(relation, max_n, &self.pending, &mut self.rng))
    }

    fn entity_facts(&mut self, entity: &str, max_n: usize) -> Result<Vec<Fact>, ChannelError> {
        Ok(self
            .world
            .answer_entity_fact_request(entity, max_n, &self.pending, &mut self.rng))
    }
}
