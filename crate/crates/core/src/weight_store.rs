//! Cell-keyed weight registry: SuperNet seeding, inheritance for new
//! individuals and the best-first generational update.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::{accept_response, EvalError, EvalRequest, Evaluator, RequestKind};
use crate::evolution::{rank_order, Individual};
use crate::genome::{structural_key, CellGene, Stage2Gene, Stage2Genome, StructuralKey};
use crate::search_space::CellLibrary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, Error)]
pub enum WeightStoreError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("supernet reply has no weights for cell key {0}")]
    MissingKey(StructuralKey),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt weight manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    #[error("blob file for key {key} is missing ({path})")]
    MissingBlob { key: StructuralKey, path: PathBuf },
    #[error("blob for key {key} does not match its manifest digest")]
    DigestMismatch { key: StructuralKey },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WeightStoreError + '_ {
    move |source| WeightStoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightBlob {
    pub key: StructuralKey,
    pub bytes: Vec<u8>,
    pub version: u64,
    pub updated_this_cycle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Inherited,
    Fresh,
}

/// Weight source of one cell position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub key: StructuralKey,
    pub source: WeightSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WeightAssignment {
    pub positions: Vec<AssignmentEntry>,
}

impl WeightAssignment {
    /// Every position marked fresh, as used when inheritance is disabled.
    pub fn all_fresh(g: &Stage2Genome) -> Self {
        let positions = (0..g.depth())
            .map(|p| AssignmentEntry { key: structural_key(p, g), source: WeightSource::Fresh })
            .collect();
        WeightAssignment { positions }
    }

    pub fn inherited_count(&self) -> usize {
        self.positions.iter().filter(|e| e.source == WeightSource::Inherited).count()
    }

    /// 0-based positions that start from fresh initialization.
    pub fn fresh_positions(&self) -> Vec<usize> {
        self.positions
            .iter()
            .enumerate()
            .filter(|(_, e)| e.source == WeightSource::Fresh)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Where each key's new payload came from in one update cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UpdateReport {
    /// (key, index into the population slice) in update order.
    pub provenance: Vec<(StructuralKey, usize)>,
    pub not_updated: Vec<StructuralKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WeightStore {
    pub blobs: BTreeMap<StructuralKey, WeightBlob>,
    pub cycle: u64,
}

/// Stack of one instance of every template, in code order.
///
/// Cell `j` reads cell `j-1` and, as skip input, cell `j-2` (the stem for
/// the first two cells).
pub fn supernet_genome(lib: &CellLibrary) -> Stage2Genome {
    let genes = lib
        .cells()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let j = i + 1;
            Stage2Gene { gene: CellGene::new(j - 1, j.saturating_sub(2), t.code), graph: t.graph.clone() }
        })
        .collect();
    Stage2Genome { genes }
}

pub fn supernet_request(lib: &CellLibrary, id: u64, epochs: u32, dataset: &str, seed: u64) -> EvalRequest {
    let genome = supernet_genome(lib);
    let assignment = WeightAssignment::all_fresh(&genome).positions;
    EvalRequest { id, kind: RequestKind::TrainSupernet, genome, assignment, epochs, dataset: dataset.to_string(), seed }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn get(&self, key: &StructuralKey) -> Option<&WeightBlob> {
        self.blobs.get(key)
    }

    pub fn contains(&self, key: &StructuralKey) -> bool {
        self.blobs.contains_key(key)
    }

    /// Seeds the store from a SuperNet training run: one blob per template,
    /// all at version 1.
    pub fn init_from_supernet(
        lib: &CellLibrary,
        evaluator: &mut dyn Evaluator,
        epochs: u32,
        dataset: &str,
        seed: u64,
    ) -> Result<Self, WeightStoreError> {
        let req = supernet_request(lib, 0, epochs, dataset, seed);
        let resp = accept_response(&req, evaluator.train_supernet(&req)?)?;
        Self::from_supernet_blobs(&req, &resp.blob_updates)
    }

    pub fn from_supernet_blobs(
        req: &EvalRequest,
        blobs: &[(StructuralKey, Vec<u8>)],
    ) -> Result<Self, WeightStoreError> {
        let mut store = WeightStore::new();
        for key in req.keys() {
            let bytes = blobs
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, b)| b.clone())
                .ok_or(WeightStoreError::MissingKey(key))?;
            store.blobs.insert(key, WeightBlob { key, bytes, version: 1, updated_this_cycle: false });
        }
        Ok(store)
    }

    /// Positions whose structural key is stored inherit; the rest start fresh.
    pub fn inherit_weights(&self, g: &Stage2Genome) -> WeightAssignment {
        let positions = (0..g.depth())
            .map(|p| {
                let key = structural_key(p, g);
                let source = if self.contains(&key) { WeightSource::Inherited } else { WeightSource::Fresh };
                AssignmentEntry { key, source }
            })
            .collect();
        WeightAssignment { positions }
    }

    /// One update cycle: walk the population best-first and give each stored
    /// key the payload of the best individual that carries it. A key is
    /// written at most once per cycle; keys not in the store are ignored.
    pub fn update_from_population(&mut self, pop: &[Individual]) -> UpdateReport {
        for blob in self.blobs.values_mut() {
            blob.updated_this_cycle = false;
        }
        let mut order: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].is_evaluated()).collect();
        order.sort_by(|&a, &b| rank_order(&pop[a], &pop[b]));

        let mut report = UpdateReport::default();
        let mut remaining = self.blobs.len();
        for i in order {
            if remaining == 0 {
                break;
            }
            for (key, bytes) in &pop[i].blobs {
                let Some(blob) = self.blobs.get_mut(key) else { continue };
                if blob.updated_this_cycle {
                    continue;
                }
                blob.bytes = bytes.clone();
                blob.version += 1;
                blob.updated_this_cycle = true;
                remaining -= 1;
                report.provenance.push((*key, i));
            }
        }
        report.not_updated = self.blobs.values().filter(|b| !b.updated_this_cycle).map(|b| b.key).collect();
        self.cycle += 1;
        report
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            cycle: self.cycle,
            entries: self
                .blobs
                .values()
                .map(|b| ManifestEntry {
                    key: b.key,
                    version: b.version,
                    digest: sha256_hex(&b.bytes),
                    updated_this_cycle: b.updated_this_cycle,
                })
                .collect(),
        }
    }

    /// Writes `blobs/<key>.bin` files, then swaps in `manifest.json`. Both
    /// go through a temporary file and a rename, so a reader never observes
    /// a partially written file.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), WeightStoreError> {
        let dir = dir.as_ref();
        let blob_dir = dir.join(BLOB_DIR);
        fs::create_dir_all(&blob_dir).map_err(io_err(&blob_dir))?;
        for b in self.blobs.values() {
            write_atomic(&blob_dir.join(format!("{}.bin", b.key)), &b.bytes)?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, WeightStoreError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| WeightStoreError::CorruptManifest {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let mut store = WeightStore { blobs: BTreeMap::new(), cycle: manifest.cycle };
        for e in manifest.entries {
            let path = dir.join(BLOB_DIR).join(format!("{}.bin", e.key));
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
                    return Err(WeightStoreError::MissingBlob { key: e.key, path })
                }
                Err(source) => return Err(WeightStoreError::Io { path, source }),
            };
            if sha256_hex(&bytes) != e.digest {
                return Err(WeightStoreError::DigestMismatch { key: e.key });
            }
            let blob = WeightBlob { key: e.key, bytes, version: e.version, updated_this_cycle: e.updated_this_cycle };
            if store.blobs.insert(e.key, blob).is_some() {
                return Err(WeightStoreError::CorruptManifest {
                    path: manifest_path,
                    reason: format!("duplicate key {}", e.key),
                });
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub cycle: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: StructuralKey,
    pub version: u64,
    /// SHA-256 of the payload, lowercase hex.
    pub digest: String,
    #[serde(default)]
    pub updated_this_cycle: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WeightStoreError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{SurrogateConfig, SurrogateEvaluator};
    use crate::evolution::fine_mutation;
    use crate::evolution::{FineMutationMode, SearchRng};
    use crate::genome::{expand_to_stage2, DecodeConfig, DepthBounds, Genome, Stage1Genome};

    fn surrogate() -> SurrogateEvaluator {
        SurrogateEvaluator::new(
            CellLibrary::default(),
            SurrogateConfig::default(),
            DepthBounds::default(),
            DecodeConfig::default(),
        )
    }

    fn seeded() -> WeightStore {
        WeightStore::init_from_supernet(&CellLibrary::default(), &mut surrogate(), 100, "fashion-mnist-1k", 1).unwrap()
    }

    #[test]
    fn supernet_seeds_every_template() {
        let lib = CellLibrary::default();
        let store = seeded();
        assert_eq!(store.len(), 8);
        for t in lib.cells() {
            let b = store.get(&StructuralKey::of(t.code, &t.graph)).unwrap();
            assert_eq!(b.version, 1);
            assert!(b.bytes.is_empty());
        }
    }

    #[test]
    fn missing_supernet_key_is_named() {
        let lib = CellLibrary::default();
        let req = supernet_request(&lib, 0, 100, "d", 0);
        let mut blobs: Vec<_> = req.keys().into_iter().map(|k| (k, vec![1u8])).collect();
        let dropped = blobs.remove(5).0;
        let err = WeightStore::from_supernet_blobs(&req, &blobs).unwrap_err();
        assert!(err.to_string().contains(&dropped.to_hex()));
    }

    #[test]
    fn inheritance_by_structure() {
        let lib = CellLibrary::default();
        let store = seeded();
        let g = expand_to_stage2(&Stage1Genome::from_codes(&[(0, 1), (0, 5), (1, 2)]), &lib, DepthBounds::default())
            .unwrap();
        let a = store.inherit_weights(&g);
        assert_eq!(a.inherited_count(), 3);
        assert_eq!(store.inherit_weights(&g), a);

        let mut rng = SearchRng::seed_from_u64(3);
        let mut edited = g.clone();
        edited.genes[1] = fine_mutation(&g, FineMutationMode::EdgeOnly, &mut rng).genes[1].clone();
        if edited.genes[1] != g.genes[1] {
            let a = store.inherit_weights(&edited);
            assert_eq!(a.fresh_positions(), vec![1]);
        }
        assert_eq!(WeightStore::new().inherit_weights(&g).inherited_count(), 0);
    }

    #[test]
    fn persist_round_trip_and_missing_blob() {
        let mut store = seeded();
        let key = *store.blobs.keys().next().unwrap();
        store.blobs.get_mut(&key).unwrap().bytes = vec![9; 300];
        let dir = tempfile::tempdir().unwrap();
        store.persist(dir.path()).unwrap();
        assert_eq!(WeightStore::load(dir.path()).unwrap(), store);

        fs::remove_file(dir.path().join(BLOB_DIR).join(format!("{key}.bin"))).unwrap();
        let err = WeightStore::load(dir.path()).unwrap_err();
        assert!(matches!(err, WeightStoreError::MissingBlob { key: k, .. } if k == key));
        assert!(err.to_string().contains(&key.to_hex()));
    }

    #[test]
    fn corrupt_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"cycle\": 1, \"entr").unwrap();
        assert!(matches!(WeightStore::load(dir.path()), Err(WeightStoreError::CorruptManifest { .. })));
    }

    #[test]
    fn unevaluated_members_do_not_update() {
        let mut store = seeded();
        let key = *store.blobs.keys().next().unwrap();
        let mut ind = Individual::new(Genome::Stage1(Stage1Genome::from_codes(&[(0, 1)])));
        ind.blobs = vec![(key, vec![1])];
        let report = store.update_from_population(&[ind]);
        assert!(report.provenance.is_empty());
        assert_eq!(report.not_updated.len(), 8);
        assert_eq!(store.cycle, 1);
    }
}
