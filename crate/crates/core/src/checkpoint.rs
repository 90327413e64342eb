//! Engine checkpoint directory: `kb.tsv`, `model.ckpt`, `buffers.tsv`, `engine.json`.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{read_buffers, write_buffers};
use crate::kb::{KbError, KnowledgeBase};
use crate::model::EmbeddingModel;
use crate::session::{Engine, SessionConfig};

pub const KB_FILE: &str = "kb.tsv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const BUFFERS_FILE: &str = "buffers.tsv";
pub const ENGINE_FILE: &str = "engine.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("no engine checkpoint in {0}")]
    Missing(PathBuf),
    #[error("{0}: {1}")]
    Io(PathBuf, io::Error),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("{0}: {1}")]
    Format(PathBuf, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EngineMeta {
    v: u32,
    seed: u64,
    sessions: u64,
    session_config: SessionConfig,
}

fn io_at(p: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |e| CheckpointError::Io(p.to_owned(), e)
}

/// Writes every file to a temporary name first, then renames.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(io_at(&tmp))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_at(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_at(path))
}

pub fn save_engine(dir: &Path, engine: &Engine) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    write_atomic(&dir.join(KB_FILE), |w| engine.kb.write(w))?;
    write_atomic(&dir.join(MODEL_FILE), |w| engine.model.write_checkpoint(w))?;
    write_atomic(&dir.join(BUFFERS_FILE), |w| write_buffers(w, &engine.perf, &engine.thr))?;
    let meta = EngineMeta {
        v: 1,
        seed: engine.seed(),
        sessions: engine.sessions(),
        session_config: engine.config,
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    write_atomic(&dir.join(ENGINE_FILE), |w| w.write_all(text.as_bytes()))
}

pub fn load_engine(dir: &Path) -> Result<Engine, CheckpointError> {
    let meta_path = dir.join(ENGINE_FILE);
    if !meta_path.exists() {
        return Err(CheckpointError::Missing(dir.to_owned()));
    }
    let text = fs::read_to_string(&meta_path).map_err(io_at(&meta_path))?;
    let meta: EngineMeta =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Format(meta_path.clone(), e.to_string()))?;
    let kb = KnowledgeBase::load(&dir.join(KB_FILE))?;
    let model_path = dir.join(MODEL_FILE);
    let file = File::open(&model_path).map_err(io_at(&model_path))?;
    let model = EmbeddingModel::read_checkpoint(&mut BufReader::new(file)).map_err(io_at(&model_path))?;
    let buf_path = dir.join(BUFFERS_FILE);
    let file = File::open(&buf_path).map_err(io_at(&buf_path))?;
    let (perf, thr) = read_buffers(BufReader::new(file)).map_err(io_at(&buf_path))?;
    // Facts appended mid-session can leave the KB ahead of the model; the next
    // session grows the tables.
    if model.num_entities() > kb.num_entities() || model.num_relations() > kb.num_relations() {
        return Err(CheckpointError::Format(
            model_path,
            format!(
                "model has {}x{} rows but the KB has {} entities and {} relations",
                model.num_entities(),
                model.num_relations(),
                kb.num_entities(),
                kb.num_relations()
            ),
        ));
    }
    Ok(Engine::from_parts(kb, model, perf, thr, meta.session_config, meta.seed, meta.sessions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{Fact, Split};
    use crate::model::ModelConfig;
    use crate::session::InitConfig;

    #[test]
    fn round_trip_preserves_engine_state() {
        let facts: Vec<Fact> = (0..30).map(|i| Fact::new(format!("e{}", i % 9), format!("r{}", i % 3), format!("e{}", (i * 7) % 11))).collect();
        let kb = KnowledgeBase::from_facts(facts.iter().map(|f| (f, Split::Train))).unwrap();
        let init = InitConfig {
            model: ModelConfig {
                dim: 6,
                ..ModelConfig::default()
            },
            epochs: 2,
            seed: 3,
        };
        let engine = Engine::initial_training(kb, init, SessionConfig::default());
        let dir = tempfile::tempdir().unwrap();
        save_engine(dir.path(), &engine).unwrap();
        let back = load_engine(dir.path()).unwrap();
        assert_eq!(back.kb.triples(), engine.kb.triples());
        assert_eq!(back.model.entity_table(), engine.model.entity_table());
        assert_eq!(back.perf, engine.perf);
        assert_eq!(back.thr, engine.thr);
        assert_eq!(back.diffident, engine.diffident);
        assert_eq!(back.sessions(), 0);
        let other = tempfile::tempdir().unwrap();
        save_engine(other.path(), &back).unwrap();
        for f in [KB_FILE, MODEL_FILE, BUFFERS_FILE, ENGINE_FILE] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(other.path().join(f)).unwrap());
        }
    }

    #[test]
    fn missing_checkpoint_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_engine(dir.path()), Err(CheckpointError::Missing(_))));
    }
}
