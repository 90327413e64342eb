//! DistMult embedding model with growing tables, margin-ranking training and
//! lazily applied Adam updates.
//!
//! Scores are `S(h, r, t) = Σ_i v_h[i] · v_r[i] · v_t[i]`, evaluated as
//! `Σ_i v_r[i] · (v_h[i] · v_t[i])` so that `S(h, r, t)` and `S(t, r, h)` are
//! bitwise equal and the per-candidate fast paths reproduce [`EmbeddingModel::score`]
//! exactly.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{EntityId, KnowledgeBase, RelationId, Triple, TripleKey};
use crate::par;

/// Hinge margin of the ranking objective.
pub const MARGIN: f64 = 1.0;
/// Corruption attempts per requested negative before giving up.
pub const NEGATIVE_RETRY_CAP: usize = 100;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub negatives: usize,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 250,
            learning_rate: 0.001,
            l2: 0.001,
            negatives: 4,
            batch_size: 128,
        }
    }
}

/// Row-major dense matrix with a fixed column count.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    dim: usize,
    data: Vec<f64>,
}

impl Table {
    fn zeros(rows: usize, dim: usize) -> Self {
        Table {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn push_zeros(&mut self, n: usize) {
        self.data.resize(self.data.len() + n * self.dim, 0.0);
    }

    fn push_uniform<R: Rng + ?Sized>(&mut self, n: usize, bound: f64, rng: &mut R) {
        self.data.reserve(n * self.dim);
        for _ in 0..n * self.dim {
            self.data.push(rng.random_range(-bound..=bound));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Table,
    second: Table,
}

impl Moments {
    fn zeros(rows: usize, dim: usize) -> Self {
        Moments {
            first: Table::zeros(rows, dim),
            second: Table::zeros(rows, dim),
        }
    }

    fn grow(&mut self, n: usize) {
        self.first.push_zeros(n);
        self.second.push_zeros(n);
    }
}

#[inline]
fn distmult(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..r.len() {
        s += r[i] * (h[i] * t[i]);
    }
    s
}

/// Candidate slot being ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(?, r, e)`: candidates fill the head slot.
    Head,
    /// `(e, r, ?)`: candidates fill the tail slot.
    Tail,
}

/// A positive triple with its corruptions, one training unit of the hinge objective.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingPair {
    pub positive: TripleKey,
    pub negatives: Vec<TripleKey>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Loss {
    pub hinge: f64,
    pub l2: f64,
    pub active_pairs: usize,
}

impl Loss {
    pub fn total(&self) -> f64 {
        self.hinge + self.l2
    }
}

/// Sparse gradients keyed by row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub entities: BTreeMap<EntityId, Vec<f64>>,
    pub relations: BTreeMap<RelationId, Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSample {
    pub triples: Vec<TripleKey>,
    /// Fewer than the requested number could be found within the retry cap.
    pub exhausted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub triples: usize,
    pub epochs: usize,
    pub steps: usize,
    /// Mean hinge loss per positive for each epoch.
    pub epoch_hinge: Vec<f64>,
    /// Mean total loss (hinge + l2) per positive for each epoch.
    pub epoch_loss: Vec<f64>,
    pub short_negative_draws: usize,
}

impl TrainSummary {
    pub fn final_hinge(&self) -> Option<f64> {
        self.epoch_hinge.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    config: ModelConfig,
    seed: u64,
    entities: Table,
    relations: Table,
    entity_moments: Moments,
    relation_moments: Moments,
    step: u64,
}

impl EmbeddingModel {
    /// Empty model; rows are added with [`EmbeddingModel::grow`].
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let dim = config.dim;
        EmbeddingModel {
            config,
            seed,
            entities: Table::zeros(0, dim),
            relations: Table::zeros(0, dim),
            entity_moments: Moments::zeros(0, dim),
            relation_moments: Moments::zeros(0, dim),
            step: 0,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: ModelConfig) {
        assert_eq!(config.dim, self.config.dim, "dimension is fixed at construction");
        self.config = config;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn entity_table(&self) -> &Table {
        &self.entities
    }

    pub fn relation_table(&self) -> &Table {
        &self.relations
    }

    pub fn entity(&self, e: EntityId) -> &[f64] {
        self.entities.row(e.index())
    }

    pub fn relation(&self, r: RelationId) -> &[f64] {
        self.relations.row(r.index())
    }

    pub fn entity_mut(&mut self, e: EntityId) -> &mut [f64] {
        self.entities.row_mut(e.index())
    }

    pub fn relation_mut(&mut self, r: RelationId) -> &mut [f64] {
        self.relations.row_mut(r.index())
    }

    fn init_bound(&self) -> f64 {
        6.0 / (self.config.dim as f64).sqrt()
    }

    /// Appends freshly initialized rows; existing rows and moments are untouched.
    pub fn grow<R: Rng + ?Sized>(&mut self, new_entities: usize, new_relations: usize, rng: &mut R) {
        let bound = self.init_bound();
        self.entities.push_uniform(new_entities, bound, rng);
        self.entity_moments.grow(new_entities);
        self.relations.push_uniform(new_relations, bound, rng);
        self.relation_moments.grow(new_relations);
    }

    /// Grows the tables to match the registries of `kb`.
    pub fn sync_with<R: Rng + ?Sized>(&mut self, kb: &KnowledgeBase, rng: &mut R) -> (usize, usize) {
        let ne = kb.num_entities().saturating_sub(self.num_entities());
        let nr = kb.num_relations().saturating_sub(self.num_relations());
        self.grow(ne, nr, rng);
        (ne, nr)
    }

    #[inline]
    pub fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> f64 {
        distmult(self.entity(h), self.relation(r), self.entity(t))
    }

    /// Score of candidate `c` filling the open slot of a query anchored at `anchor`.
    #[inline]
    pub fn score_candidate(&self, direction: Direction, anchor: EntityId, r: RelationId, c: EntityId) -> f64 {
        match direction {
            Direction::Tail => self.score(anchor, r, c),
            Direction::Head => self.score(c, r, anchor),
        }
    }

    /// `S(h, r, e)` for every entity `e`.
    pub fn score_all_tails(&self, h: EntityId, r: RelationId) -> Vec<f64> {
        let (hv, rv) = (self.entity(h), self.relation(r));
        par::map_range(self.num_entities(), |i| distmult(hv, rv, self.entities.row(i)))
    }

    /// `S(e, r, t)` for every entity `e`.
    pub fn score_all_heads(&self, r: RelationId, t: EntityId) -> Vec<f64> {
        let (rv, tv) = (self.relation(r), self.entity(t));
        par::map_range(self.num_entities(), |i| distmult(self.entities.row(i), rv, tv))
    }

    pub fn score_all(&self, direction: Direction, anchor: EntityId, r: RelationId) -> Vec<f64> {
        match direction {
            Direction::Tail => self.score_all_tails(anchor, r),
            Direction::Head => self.score_all_heads(r, anchor),
        }
    }

    /// Sequential variant of [`EmbeddingModel::score_all`].
    pub fn score_all_seq(&self, direction: Direction, anchor: EntityId, r: RelationId) -> Vec<f64> {
        let (av, rv) = (self.entity(anchor), self.relation(r));
        match direction {
            Direction::Tail => par::map_range_seq(self.num_entities(), |i| distmult(av, rv, self.entities.row(i))),
            Direction::Head => par::map_range_seq(self.num_entities(), |i| distmult(self.entities.row(i), rv, av)),
        }
    }

    /// Up to `k` distinct corruptions of `positive`, each replacing the head or
    /// the tail (chosen uniformly) with a uniformly drawn entity, none of which
    /// is stored in `kb`.
    pub fn negative_samples<R: Rng + ?Sized>(
        kb: &KnowledgeBase,
        positive: TripleKey,
        k: usize,
        rng: &mut R,
    ) -> NegativeSample {
        let n = kb.num_entities() as u32;
        let mut out: Vec<TripleKey> = Vec::with_capacity(k);
        if k == 0 {
            return NegativeSample::default();
        }
        if n < 2 {
            return NegativeSample {
                triples: out,
                exhausted: true,
            };
        }
        let (h, r, t) = positive;
        let mut exhausted = false;
        for _ in 0..k {
            let mut found = None;
            for _ in 0..NEGATIVE_RETRY_CAP {
                let e = EntityId(rng.random_range(0..n));
                let cand = if rng.random_bool(0.5) { (e, r, t) } else { (h, r, e) };
                if !kb.contains(cand.0, cand.1, cand.2) && !out.contains(&cand) {
                    found = Some(cand);
                    break;
                }
            }
            match found {
                Some(c) => out.push(c),
                None => {
                    exhausted = true;
                    break;
                }
            }
        }
        if exhausted {
            log::debug!("negative sampling exhausted for {:?}: {} of {}", positive, out.len(), k);
        }
        NegativeSample { triples: out, exhausted }
    }

    /// Hinge ranking loss over `pairs` plus l2 on every row the batch touches,
    /// with analytic gradients.
    pub fn hinge_loss_and_grads(&self, pairs: &[RankingPair]) -> (Loss, Gradients) {
        let dim = self.dim();
        let mut loss = Loss::default();
        let mut grads = Gradients::default();

        let add = |grads: &mut Gradients, (h, r, t): TripleKey, sign: f64| {
            let (hv, rv, tv) = (self.entity(h), self.relation(r), self.entity(t));
            let gh = grads.entities.entry(h).or_insert_with(|| vec![0.0; dim]);
            for i in 0..dim {
                gh[i] += sign * rv[i] * tv[i];
            }
            let gt = grads.entities.entry(t).or_insert_with(|| vec![0.0; dim]);
            for i in 0..dim {
                gt[i] += sign * hv[i] * rv[i];
            }
            let gr = grads.relations.entry(r).or_insert_with(|| vec![0.0; dim]);
            for i in 0..dim {
                gr[i] += sign * hv[i] * tv[i];
            }
        };

        for pair in pairs {
            let (h, r, t) = pair.positive;
            let pos = self.score(h, r, t);
            touch(&mut grads, pair.positive, dim);
            for &neg in &pair.negatives {
                touch(&mut grads, neg, dim);
                let violation = self.score(neg.0, neg.1, neg.2) - pos + MARGIN;
                if violation > 0.0 {
                    loss.hinge += violation;
                    loss.active_pairs += 1;
                    add(&mut grads, neg, 1.0);
                    add(&mut grads, pair.positive, -1.0);
                }
            }
        }

        let l2 = self.config.l2;
        if l2 != 0.0 {
            for (e, g) in grads.entities.iter_mut() {
                let v = self.entity(*e);
                loss.l2 += l2 * v.iter().map(|x| x * x).sum::<f64>();
                for i in 0..dim {
                    g[i] += 2.0 * l2 * v[i];
                }
            }
            for (r, g) in grads.relations.iter_mut() {
                let v = self.relation(*r);
                loss.l2 += l2 * v.iter().map(|x| x * x).sum::<f64>();
                for i in 0..dim {
                    g[i] += 2.0 * l2 * v[i];
                }
            }
        }
        (loss, grads)
    }

    /// One bias-corrected Adam step over the rows present in `grads`.
    pub fn apply_adam(&mut self, grads: &Gradients) {
        self.step += 1;
        let lr = self.config.learning_rate;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step.min(i32::MAX as u64) as i32);
        for (e, g) in &grads.entities {
            adam_row(
                self.entities.row_mut(e.index()),
                self.entity_moments.first.row_mut(e.index()),
                self.entity_moments.second.row_mut(e.index()),
                g,
                lr,
                c1,
                c2,
            );
        }
        for (r, g) in &grads.relations {
            adam_row(
                self.relations.row_mut(r.index()),
                self.relation_moments.first.row_mut(r.index()),
                self.relation_moments.second.row_mut(r.index()),
                g,
                lr,
                c1,
                c2,
            );
        }
    }

    /// Mini-batch training over `triples` for `epochs` passes. Negatives are
    /// redrawn for every batch.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        kb: &KnowledgeBase,
        triples: &[Triple],
        epochs: usize,
        rng: &mut R,
    ) -> TrainSummary {
        let mut summary = TrainSummary {
            triples: triples.len(),
            epochs,
            ..Default::default()
        };
        if triples.is_empty() || epochs == 0 {
            summary.epochs = 0;
            return summary;
        }
        let batch = self.config.batch_size.max(1);
        let mut order: Vec<TripleKey> = triples.iter().map(Triple::key).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            let (mut hinge, mut total) = (0.0, 0.0);
            for chunk in order.chunks(batch) {
                let pairs: Vec<RankingPair> = chunk
                    .iter()
                    .map(|&positive| {
                        let sample = Self::negative_samples(kb, positive, self.config.negatives, rng);
                        if sample.exhausted {
                            summary.short_negative_draws += 1;
                        }
                        RankingPair {
                            positive,
                            negatives: sample.triples,
                        }
                    })
                    .collect();
                let (loss, grads) = self.hinge_loss_and_grads(&pairs);
                hinge += loss.hinge;
                total += loss.total();
                self.apply_adam(&grads);
                summary.steps += 1;
            }
            summary.epoch_hinge.push(hinge / order.len() as f64);
            summary.epoch_loss.push(total / order.len() as f64);
        }
        summary
    }

    pub fn all_finite(&self) -> bool {
        self.entities.data.iter().chain(&self.relations.data).all(|x| x.is_finite())
    }
}

fn touch(grads: &mut Gradients, (h, r, t): TripleKey, dim: usize) {
    grads.entities.entry(h).or_insert_with(|| vec![0.0; dim]);
    grads.entities.entry(t).or_insert_with(|| vec![0.0; dim]);
    grads.relations.entry(r).or_insert_with(|| vec![0.0; dim]);
}

#[inline]
fn adam_row(param: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, c1: f64, c2: f64) {
    for i in 0..param.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

// Binary checkpoint layout (little-endian):
//   magic "CILKMODL", u32 version,
//   u64 dim, u64 entity rows, u64 relation rows, u64 adam step, u64 seed,
//   f64 learning_rate, f64 l2, u64 negatives, u64 batch_size,
//   then f64 tables: entities, relations, entity m, entity v, relation m, relation v.
const MAGIC: &[u8; 8] = b"CILKMODL";
const VERSION: u32 = 1;

impl EmbeddingModel {
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for x in [
            self.config.dim as u64,
            self.num_entities() as u64,
            self.num_relations() as u64,
            self.step,
            self.seed,
        ] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&self.config.learning_rate.to_le_bytes())?;
        w.write_all(&self.config.l2.to_le_bytes())?;
        w.write_all(&(self.config.negatives as u64).to_le_bytes())?;
        w.write_all(&(self.config.batch_size as u64).to_le_bytes())?;
        for table in [
            &self.entities,
            &self.relations,
            &self.entity_moments.first,
            &self.entity_moments.second,
            &self.relation_moments.first,
            &self.relation_moments.second,
        ] {
            for x in &table.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_owned());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let dim = read_u64(r)? as usize;
        let ne = read_u64(r)? as usize;
        let nr = read_u64(r)? as usize;
        let step = read_u64(r)?;
        let seed = read_u64(r)?;
        let config = ModelConfig {
            dim,
            learning_rate: read_f64(r)?,
            l2: read_f64(r)?,
            negatives: read_u64(r)? as usize,
            batch_size: read_u64(r)? as usize,
        };
        let mut table = |rows: usize| -> io::Result<Table> {
            let mut data = Vec::with_capacity(rows * dim);
            for _ in 0..rows * dim {
                data.push(read_f64(r)?);
            }
            Ok(Table { dim, data })
        };
        let entities = table(ne)?;
        let relations = table(nr)?;
        let entity_moments = Moments {
            first: table(ne)?,
            second: table(ne)?,
        };
        let relation_moments = Moments {
            first: table(nr)?,
            second: table(nr)?,
        };
        Ok(EmbeddingModel {
            config,
            seed,
            entities,
            relations,
            entity_moments,
            relation_moments,
            step,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
