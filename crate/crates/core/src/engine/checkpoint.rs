use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Engine, EngineError, HistoryRow, Phase, SearchConfig};
use crate::evolution::{Individual, RngState, SearchRng};
use crate::search_space::CellLibrary;
use crate::weight_store::{sha256_hex, write_atomic, WeightStore};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub(crate) const STATE_FILE: &str = "state.json";
const POPULATION_FILE: &str = "population.json";
const RNG_FILE: &str = "rng.json";
const WEIGHTS_DIR: &str = "weights";

/// Contents of `state.json`. It is written last and pins the other files by
/// digest, so a checkpoint torn by a crash is detected on resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub format: u32,
    pub config_hash: String,
    pub config: SearchConfig,
    pub phase: Phase,
    pub generation: usize,
    pub next_request_id: u64,
    pub evaluations: u64,
    pub history: Vec<HistoryRow>,
    pub population_sha256: String,
    pub rng_sha256: String,
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("checkpoint data serializes");
    s.push('\n');
    s
}

impl Engine {
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), EngineError> {
        let fail = |reason: String| EngineError::Checkpoint { path: dir.to_path_buf(), reason };
        fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
        self.store.persist(dir.join(WEIGHTS_DIR)).map_err(|e| fail(e.to_string()))?;

        let population = pretty(&self.population);
        let rng = pretty(&self.rng.state());
        let state = CheckpointState {
            format: CHECKPOINT_FORMAT,
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            phase: self.phase,
            generation: self.generation,
            next_request_id: self.next_id,
            evaluations: self.evaluations,
            history: self.history.clone(),
            population_sha256: sha256_hex(population.as_bytes()),
            rng_sha256: sha256_hex(rng.as_bytes()),
        };
        for (name, text) in [(POPULATION_FILE, population), (RNG_FILE, rng), (STATE_FILE, pretty(&state))] {
            write_atomic(&dir.join(name), text.as_bytes()).map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }

    /// Restores an engine from `dir`. When `expected` is given, the
    /// checkpoint must have been written under exactly that config.
    pub fn resume(dir: &Path, lib: CellLibrary, expected: Option<&SearchConfig>) -> Result<Engine, EngineError> {
        let fail = |reason: String| EngineError::Checkpoint { path: dir.to_path_buf(), reason };
        let read = |name: &str| -> Result<String, EngineError> {
            let path: PathBuf = dir.join(name);
            fs::read_to_string(&path).map_err(|e| fail(format!("{name}: {e}")))
        };
        let state: CheckpointState =
            serde_json::from_str(&read(STATE_FILE)?).map_err(|e| fail(format!("{STATE_FILE}: {e}")))?;
        if state.format != CHECKPOINT_FORMAT {
            return Err(fail(format!("unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})", state.format)));
        }
        if state.config.hash() != state.config_hash {
            return Err(fail("stored config does not match its hash".into()));
        }
        if let Some(cfg) = expected {
            if cfg.hash() != state.config_hash {
                return Err(EngineError::ConfigMismatch {
                    path: dir.to_path_buf(),
                    expected: cfg.hash(),
                    found: state.config_hash,
                });
            }
        }
        let population_text = read(POPULATION_FILE)?;
        let rng_text = read(RNG_FILE)?;
        if sha256_hex(population_text.as_bytes()) != state.population_sha256 {
            return Err(fail(format!("{POPULATION_FILE} does not match the state digest")));
        }
        if sha256_hex(rng_text.as_bytes()) != state.rng_sha256 {
            return Err(fail(format!("{RNG_FILE} does not match the state digest")));
        }
        let population: Vec<Individual> =
            serde_json::from_str(&population_text).map_err(|e| fail(format!("{POPULATION_FILE}: {e}")))?;
        let rng_state: RngState = serde_json::from_str(&rng_text).map_err(|e| fail(format!("{RNG_FILE}: {e}")))?;
        let rng = SearchRng::from_state(&rng_state).ok_or_else(|| fail(format!("{RNG_FILE}: bad generator state")))?;
        let store = WeightStore::load(dir.join(WEIGHTS_DIR)).map_err(|e| fail(e.to_string()))?;

        let mut engine = Engine::new(state.config, lib)?;
        engine.rng = rng;
        engine.store = store;
        engine.population = population;
        engine.phase = state.phase;
        engine.generation = state.generation;
        engine.next_id = state.next_request_id;
        engine.evaluations = state.evaluations;
        engine.history = state.history;
        Ok(engine)
    }

    /// SHA-256 over the full resumable state.
    pub fn state_digest(&self) -> String {
        let mut text = String::new();
        text.push_str(&self.cfg.hash());
        text.push_str(&pretty(&(self.phase, self.generation, self.next_id, self.evaluations)));
        text.push_str(&pretty(&self.history));
        text.push_str(&pretty(&self.population));
        text.push_str(&pretty(&self.rng.state()));
        text.push_str(&pretty(&self.store.manifest()));
        sha256_hex(text.as_bytes())
    }
}
