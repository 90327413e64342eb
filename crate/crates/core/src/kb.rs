//! Growing triple store.
//!
//! Entities and relations are interned into dense ids in first-seen order, so
//! the embedding tables can index rows directly by id. Triples are never
//! removed; every triple carries a split mark assigned when it was inserted.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(rename = "valid")]
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "valid",
        }
    }
}

/// A stored triple, resolved to registry ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub split: Split,
}

impl Triple {
    pub fn key(&self) -> TripleKey {
        (self.head, self.relation, self.tail)
    }

    pub fn contains_entity(&self, e: EntityId) -> bool {
        self.head == e || self.tail == e
    }
}

pub type TripleKey = (EntityId, RelationId, EntityId);

/// A triple spelled with names, as exchanged with users and files.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Fact {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Fact {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    pub fn mentions_entity(&self, name: &str) -> bool {
        self.head == name || self.tail == name
    }
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Either kind of KB symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Entity(EntityId),
    Relation(RelationId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    Added,
    Duplicate,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("malformed triple: {0}")]
    Malformed(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Name <-> dense id interning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Registry {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = u32::try_from(self.names.len()).expect("registry overflow");
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    entities: Registry,
    relations: Registry,
    triples: Vec<Triple>,
    keys: HashMap<TripleKey, usize>,
    by_entity: Vec<Vec<usize>>,
    by_relation: Vec<Vec<usize>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_facts<'a>(facts: impl IntoIterator<Item = (&'a Fact, Split)>) -> Result<Self, KbError> {
        let mut kb = KnowledgeBase::new();
        for (fact, split) in facts {
            kb.add_fact(fact, split)?;
        }
        Ok(kb)
    }

    pub fn entities(&self) -> &Registry {
        &self.entities
    }

    pub fn relations(&self) -> &Registry {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// All triples in insertion order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id.0)
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id.0)
    }

    pub fn is_entity_known(&self, name: &str) -> bool {
        self.entities.get(name).is_some()
    }

    pub fn is_relation_known(&self, name: &str) -> bool {
        self.relations.get(name).is_some()
    }

    /// True if `name` is registered as an entity or as a relation.
    pub fn is_known(&self, name: &str) -> bool {
        self.is_entity_known(name) || self.is_relation_known(name)
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.keys.contains_key(&(head, relation, tail))
    }

    pub fn contains_fact(&self, fact: &Fact) -> bool {
        match (
            self.entity_id(&fact.head),
            self.relation_id(&fact.relation),
            self.entity_id(&fact.tail),
        ) {
            (Some(h), Some(r), Some(t)) => self.contains(h, r, t),
            _ => false,
        }
    }

    pub fn get(&self, key: TripleKey) -> Option<&Triple> {
        self.keys.get(&key).map(|&i| &self.triples[i])
    }

    pub fn fact(&self, t: &Triple) -> Fact {
        Fact::new(
            self.entity_name(t.head),
            self.relation_name(t.relation),
            self.entity_name(t.tail),
        )
    }

    /// Inserts a triple, registering unseen names. Existing keys are left untouched.
    pub fn add_fact(&mut self, fact: &Fact, split: Split) -> Result<Insertion, KbError> {
        for (slot, name) in [("head", &fact.head), ("relation", &fact.relation), ("tail", &fact.tail)] {
            if name.is_empty() {
                return Err(KbError::Malformed(format!("empty {slot} in {fact}")));
            }
            if name.contains(['\t', '\n', '\r']) {
                return Err(KbError::Malformed(format!("control character in {slot} of {fact}")));
            }
        }
        if self.contains_fact(fact) {
            return Ok(Insertion::Duplicate);
        }
        let head = EntityId(self.entities.intern(&fact.head));
        let relation = RelationId(self.relations.intern(&fact.relation));
        let tail = EntityId(self.entities.intern(&fact.tail));
        self.by_entity.resize_with(self.entities.len(), Vec::new);
        self.by_relation.resize_with(self.relations.len(), Vec::new);
        let idx = self.triples.len();
        self.triples.push(Triple {
            head,
            relation,
            tail,
            split,
        });
        self.keys.insert((head, relation, tail), idx);
        self.by_entity[head.index()].push(idx);
        if tail != head {
            self.by_entity[tail.index()].push(idx);
        }
        self.by_relation[relation.index()].push(idx);
        Ok(Insertion::Added)
    }

    /// Re-marks the split of an existing triple.
    pub fn set_split(&mut self, key: TripleKey, split: Split) -> bool {
        match self.keys.get(&key) {
            Some(&i) => {
                self.triples[i].split = split;
                true
            }
            None => false,
        }
    }

    pub fn triples_of_entity(&self, e: EntityId) -> impl Iterator<Item = &Triple> + '_ {
        self.by_entity
            .get(e.index())
            .into_iter()
            .flatten()
            .map(move |&i| &self.triples[i])
    }

    pub fn triples_of_relation(&self, r: RelationId) -> impl Iterator<Item = &Triple> + '_ {
        self.by_relation
            .get(r.index())
            .into_iter()
            .flatten()
            .map(move |&i| &self.triples[i])
    }

    pub fn triples_involving(&self, symbol: Symbol) -> Box<dyn Iterator<Item = &Triple> + '_> {
        match symbol {
            Symbol::Entity(e) => Box::new(self.triples_of_entity(e)),
            Symbol::Relation(r) => Box::new(self.triples_of_relation(r)),
        }
    }

    pub fn entity_degree(&self, e: EntityId) -> usize {
        self.by_entity.get(e.index()).map_or(0, Vec::len)
    }

    /// Tails `t` with `(head, relation, t)` stored, in id order.
    pub fn tails_of(&self, head: EntityId, relation: RelationId) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = self
            .triples_of_entity(head)
            .filter(|t| t.head == head && t.relation == relation)
            .map(|t| t.tail)
            .collect();
        out.sort_unstable();
        out
    }

    /// Heads `h` with `(h, relation, tail)` stored, in id order.
    pub fn heads_of(&self, relation: RelationId, tail: EntityId) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = self
            .triples_of_entity(tail)
            .filter(|t| t.tail == tail && t.relation == relation)
            .map(|t| t.head)
            .collect();
        out.sort_unstable();
        out
    }

    /// Uniform sample without replacement of at most `max_n` triples that
    /// involve `symbol` and carry split mark `split`. Output keeps insertion order.
    pub fn sample_involving<R: Rng + ?Sized>(
        &self,
        symbol: Symbol,
        split: Split,
        max_n: usize,
        rng: &mut R,
    ) -> Vec<Triple> {
        let pool: Vec<Triple> = self.triples_involving(symbol).filter(|t| t.split == split).copied().collect();
        sample_subset(pool, max_n, rng)
    }

    pub fn split_counts(&self) -> (usize, usize) {
        let train = self.triples.iter().filter(|t| t.split == Split::Train).count();
        (train, self.triples.len() - train)
    }

    /// Reads the tab-separated triple format. Blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, KbError> {
        let file = fs::File::open(path)?;
        Self::read(BufReader::new(file))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, KbError> {
        let mut kb = KnowledgeBase::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if let Some((fact, split)) = parse_line(&line, lineno)? {
                kb.add_fact(&fact, split).map_err(|e| KbError::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            }
        }
        Ok(kb)
    }

    /// Writes every triple in insertion order, which preserves id assignment on reload.
    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for t in &self.triples {
            write_line(w, &self.fact(t), t.split)?;
        }
        Ok(())
    }
}

pub fn write_line<W: Write>(w: &mut W, fact: &Fact, split: Split) -> io::Result<()> {
    writeln!(w, "{}\t{}\t{}\t{}", fact.head, fact.relation, fact.tail, split.as_str())
}

/// Parses one line of the triple format; `Ok(None)` for blanks and comments.
pub fn parse_line(line: &str, lineno: usize) -> Result<Option<(Fact, Split)>, KbError> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split('\t').collect();
    let err = |message: String| KbError::Parse { line: lineno, message };
    let split = match fields.len() {
        3 => Split::Train,
        4 => match fields[3] {
            "train" => Split::Train,
            "valid" => Split::Validation,
            other => return Err(err(format!("unknown split mark {other:?}"))),
        },
        n => return Err(err(format!("expected 3 or 4 tab-separated fields, found {n}"))),
    };
    if fields[..3].iter().any(|f| f.is_empty()) {
        return Err(err("empty field".into()));
    }
    Ok(Some((Fact::new(fields[0], fields[1], fields[2]), split)))
}

/// Uniform subset of at most `max_n` items without replacement, keeping input order.
pub fn sample_subset<T, R: Rng + ?Sized>(pool: Vec<T>, max_n: usize, rng: &mut R) -> Vec<T> {
    if max_n >= pool.len() {
        return pool;
    }
    if max_n == 0 {
        return Vec::new();
    }
    let mut picked = index::sample(rng, pool.len(), max_n).into_vec();
    picked.sort_unstable();
    let mut picked = picked.into_iter().peekable();
    pool.into_iter()
        .enumerate()
        .filter_map(|(i, t)| {
            if picked.peek() == Some(&i) {
                picked.next();
                Some(t)
            } else {
                None
            }
        })
        .collect()
}

/// How acquired or initial triples are assigned a split mark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMarking {
    /// Shuffle the batch and mark `round(alpha * n)` of it as train.
    Exact { alpha: f64 },
    /// Mark each triple train with probability `alpha`.
    Bernoulli { alpha: f64 },
}

impl SplitMarking {
    /// Split marks for a batch of `n` items, in batch order.
    pub fn marks<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<Split> {
        match self {
            SplitMarking::Exact { alpha } => {
                let n_train = ((alpha * n as f64).round() as usize).min(n);
                let train: Vec<usize> = index::sample(rng, n, n_train).into_vec();
                let mut marks = vec![Split::Validation; n];
                for i in train {
                    marks[i] = Split::Train;
                }
                marks
            }
            SplitMarking::Bernoulli { alpha } => (0..n)
                .map(|_| {
                    if rng.random_bool(alpha.clamp(0.0, 1.0)) {
                        Split::Train
                    } else {
                        Split::Validation
                    }
                })
                .collect(),
        }
    }
}
