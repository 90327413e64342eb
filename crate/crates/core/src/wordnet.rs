//! Importer for the Princeton WordNet database files (`data.noun`, `data.verb`,
//! `data.adj`, `data.adv`) producing a synset-level triple store with the
//! eighteen WN18 relation types.
//!
//! Entities are named `lemma.pos.offset`, e.g. `dog.n.02084071`.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kb::Fact;

#[derive(Debug, Error)]
pub enum WordnetError {
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

/// Pointer symbol to WN18 relation name.
pub fn relation_for_pointer(symbol: &str) -> Option<&'static str> {
    Some(match symbol {
        "@" => "_hypernym",
        "~" => "_hyponym",
        "@i" => "_instance_hypernym",
        "~i" => "_instance_hyponym",
        "#m" => "_member_holonym",
        "%m" => "_member_meronym",
        "#p" => "_part_of",
        "%p" => "_has_part",
        "+" => "_derivationally_related_form",
        ";c" => "_synset_domain_topic_of",
        "-c" => "_member_of_domain_topic",
        ";r" => "_synset_domain_region_of",
        "-r" => "_member_of_domain_region",
        ";u" => "_synset_domain_usage_of",
        "-u" => "_member_of_domain_usage",
        "^" => "_also_see",
        "$" => "_verb_group",
        "&" => "_similar_to",
        _ => return None,
    })
}

type SynsetKey = (char, u32);

#[derive(Debug)]
struct Synset {
    name: String,
    pointers: Vec<(&'static str, SynsetKey)>,
}

fn normalize_pos(c: char) -> char {
    if c == 's' {
        'a'
    } else {
        c
    }
}

fn parse_data_line(line: &str) -> Result<Option<(SynsetKey, Synset)>, String> {
    if line.starts_with(' ') || line.trim().is_empty() {
        return Ok(None);
    }
    let body = line.split(" | ").next().unwrap_or(line);
    let mut tok = body.split_ascii_whitespace();
    let mut next = |what: &str| tok.next().ok_or_else(|| format!("missing {what}"));
    let offset: u32 = next("offset")?.parse().map_err(|e| format!("bad offset: {e}"))?;
    let _lex_filenum = next("lex_filenum")?;
    let pos = next("ss_type")?.chars().next().ok_or("empty ss_type")?;
    let pos = normalize_pos(pos);
    let w_cnt = usize::from_str_radix(next("w_cnt")?, 16).map_err(|e| format!("bad w_cnt: {e}"))?;
    let mut first_word = None;
    for _ in 0..w_cnt {
        let word = next("word")?;
        let _lex_id = next("lex_id")?;
        if first_word.is_none() {
            // Adjective markers like "(a)" are appended directly to the lemma.
            let lemma = word.split('(').next().unwrap_or(word).to_lowercase();
            first_word = Some(lemma);
        }
    }
    let p_cnt: usize = next("p_cnt")?.parse().map_err(|e| format!("bad p_cnt: {e}"))?;
    let mut pointers = Vec::new();
    for _ in 0..p_cnt {
        let symbol = next("pointer symbol")?;
        let target: u32 = next("pointer offset")?.parse().map_err(|e| format!("bad pointer offset: {e}"))?;
        let tpos = normalize_pos(next("pointer pos")?.chars().next().ok_or("empty pointer pos")?);
        let _source_target = next("source/target")?;
        if let Some(rel) = relation_for_pointer(symbol) {
            pointers.push((rel, (tpos, target)));
        }
    }
    let name = format!("{}.{}.{:08}", first_word.unwrap_or_default(), pos, offset);
    Ok(Some(((pos, offset), Synset { name, pointers })))
}

/// Reads all four data files under `dict_dir` and returns the distinct triples.
pub fn read_database(dict_dir: &Path) -> Result<Vec<Fact>, WordnetError> {
    let mut synsets: HashMap<SynsetKey, Synset> = HashMap::new();
    for file in ["data.noun", "data.verb", "data.adj", "data.adv"] {
        let path = dict_dir.join(file);
        let text = fs::read_to_string(&path).map_err(|e| WordnetError::Io(path.display().to_string(), e))?;
        for (i, line) in text.lines().enumerate() {
            match parse_data_line(line) {
                Ok(Some((key, synset))) => {
                    synsets.insert(key, synset);
                }
                Ok(None) => {}
                Err(message) => {
                    return Err(WordnetError::Parse {
                        file: file.to_owned(),
                        line: i + 1,
                        message,
                    })
                }
            }
        }
    }
    let mut keys: Vec<&SynsetKey> = synsets.keys().collect();
    keys.sort();
    let mut seen = BTreeSet::new();
    let mut facts = Vec::new();
    for key in keys {
        let synset = &synsets[key];
        for (rel, target) in &synset.pointers {
            let Some(tail) = synsets.get(target) else { continue };
            let fact = Fact::new(synset.name.clone(), *rel, tail.name.clone());
            if seen.insert(fact.clone()) {
                facts.push(fact);
            }
        }
    }
    Ok(facts)
}

/// Keeps the `min_degree`-core of the triple graph: entities are removed
/// repeatedly until every survivor takes part in at least `min_degree` triples.
pub fn degree_core(facts: &[Fact], min_degree: usize) -> Vec<Fact> {
    let mut alive: Vec<bool> = vec![true; facts.len()];
    loop {
        let mut degree: HashMap<&str, usize> = HashMap::new();
        for (f, _) in facts.iter().zip(&alive).filter(|(_, &a)| a) {
            *degree.entry(&f.head).or_default() += 1;
            if f.tail != f.head {
                *degree.entry(&f.tail).or_default() += 1;
            }
        }
        let mut changed = false;
        for (f, a) in facts.iter().zip(alive.iter_mut()) {
            if *a && (degree[f.head.as_str()] < min_degree || degree[f.tail.as_str()] < min_degree) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    facts
        .iter()
        .zip(alive)
        .filter(|(_, a)| *a)
        .map(|(f, _)| f.clone())
        .collect()
}

/// Breadth-first region of about `target_entities` entities, restarting from
/// a pseudo-randomly chosen unvisited entity whenever the frontier empties.
/// Returns the triples whose head and tail both lie in the region.
pub fn bfs_region(facts: &[Fact], target_entities: usize, seed: u64) -> Vec<Fact> {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for f in facts {
        adj.entry(&f.head).or_default().push(&f.tail);
        adj.entry(&f.tail).or_default().push(&f.head);
    }
    let names: Vec<&str> = adj.keys().copied().collect();
    if names.is_empty() {
        return Vec::new();
    }
    let target = target_entities.min(names.len());
    let mut visited: BTreeSet<&str> = BTreeSet::new();
    let mut queue = VecDeque::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while visited.len() < target {
        let Some(u) = queue.pop_front() else {
            let start = names[rng.random_range(0..names.len())];
            if visited.insert(start) {
                queue.push_back(start);
            }
            continue;
        };
        for &v in &adj[u] {
            if visited.len() < target && visited.insert(v) {
                queue.push_back(v);
            }
        }
    }
    facts
        .iter()
        .filter(|f| visited.contains(f.head.as_str()) && visited.contains(f.tail.as_str()))
        .cloned()
        .collect()
}

/// Parameters of the desk-scale extraction.
#[derive(Debug, Clone, Copy)]
pub struct ExtractConfig {
    pub outer_core: usize,
    pub region_entities: usize,
    pub inner_core: usize,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            outer_core: 5,
            region_entities: 5000,
            inner_core: 3,
            seed: 1000,
        }
    }
}

/// Dense WN18-style subset: outer degree core, a breadth-first region of
/// it, then an inner core to drop entities the region cut loose.
pub fn extract(facts: &[Fact], cfg: ExtractConfig) -> Vec<Fact> {
    let core = degree_core(facts, cfg.outer_core);
    let region = bfs_region(&core, cfg.region_entities, cfg.seed);
    degree_core(&region, cfg.inner_core)
}

/// Triple counts per relation, sorted by name.
pub fn relation_histogram(facts: &[Fact]) -> BTreeMap<&str, usize> {
    let mut hist = BTreeMap::new();
    for f in facts {
        *hist.entry(f.relation.as_str()).or_default() += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOUN: &str = "  1 This software and database is being provided to you, the LICENSEE, by  \n\
00001740 03 n 01 entity 0 003 ~ 00001930 n 0000 ~ 00002137 n 0000 ~ 04434377 n 0000 | that which is perceived\n\
00001930 03 n 01 physical_entity 0 001 @ 00001740 n 0000 | an entity that has physical existence\n\
00002137 03 n 02 abstraction 0 abstract_entity 0 002 @ 00001740 n 0000 + 00059963 v 0101 | a general concept\n";
    const VERB: &str = "00059963 29 v 01 brood 0 001 $ 00002137 v 0000 01 + 02 00 | sit on (eggs)\n";

    #[test]
    fn parses_synsets_and_pointers() {
        let (key, s) = parse_data_line(NOUN.lines().nth(3).unwrap()).unwrap().unwrap();
        assert_eq!(key, ('n', 2137));
        assert_eq!(s.name, "abstraction.n.00002137");
        assert_eq!(s.pointers, vec![("_hypernym", ('n', 1740)), ("_derivationally_related_form", ('v', 59963))]);
        assert!(parse_data_line(NOUN.lines().next().unwrap()).unwrap().is_none());
        assert!(parse_data_line("00001740 03 n zz").is_err());
    }

    #[test]
    fn reads_a_small_database() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data.noun"), NOUN).unwrap();
        fs::write(dir.path().join("data.verb"), VERB).unwrap();
        fs::write(dir.path().join("data.adj"), "").unwrap();
        fs::write(dir.path().join("data.adv"), "").unwrap();
        let facts = read_database(dir.path()).unwrap();
        // 04434377 is dangling; the verb-group pointer targets a verb that does not exist.
        assert_eq!(facts.len(), 5);
        assert!(facts.contains(&Fact::new("entity.n.00001740", "_hyponym", "physical_entity.n.00001930")));
        assert!(facts.contains(&Fact::new("abstraction.n.00002137", "_derivationally_related_form", "brood.v.00059963")));
        let hist = relation_histogram(&facts);
        assert_eq!(hist["_hypernym"], 2);
    }

    #[test]
    fn core_peels_low_degree_entities() {
        let facts = vec![
            Fact::new("a", "r", "b"),
            Fact::new("b", "r", "c"),
            Fact::new("c", "r", "a"),
            Fact::new("c", "r", "d"),
        ];
        let core = degree_core(&facts, 2);
        assert_eq!(core.len(), 3);
        assert!(core.iter().all(|f| f.head != "d" && f.tail != "d"));
        assert_eq!(degree_core(&facts, 3).len(), 0);
    }

    #[test]
    fn region_is_induced_and_bounded() {
        let facts: Vec<Fact> = (0..40).map(|i| Fact::new(format!("n{i}"), "r", format!("n{}", (i + 1) % 40))).collect();
        let region = bfs_region(&facts, 10, 3);
        let ents: BTreeSet<&str> = region.iter().flat_map(|f| [f.head.as_str(), f.tail.as_str()]).collect();
        assert!(ents.len() <= 10);
        assert_eq!(region.len(), 9);
        assert_eq!(bfs_region(&facts, 10, 3), region);
    }
}
