//! Genome file schema: `{"stage": 1|2, "genes": [...]}`.
//!
//! Stage-1 genes are `{"prev", "skip", "cell"}` objects; stage-2 genes add a
//! `nodes` array of 4-integer tuples.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    validate_stage1, validate_stage2, CellGene, DepthBounds, Genome, Stage1Genome, Stage2Gene,
    Stage2Genome, Violations,
};
use crate::search_space::{CellGraph, CellLibrary, NodeGene};

#[derive(Debug, Error)]
pub enum GenomeFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed genome file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown genome stage {0}")]
    UnknownStage(u8),
    #[error("expected a stage-{expected} genome, found stage {found}")]
    StageMismatch { expected: u8, found: u8 },
    #[error("stage-2 gene {position} has no nodes")]
    MissingNodes { position: usize },
    #[error("stage-1 gene {position} carries nodes")]
    UnexpectedNodes { position: usize },
    #[error("invalid genome: {0}")]
    Invalid(#[from] Violations),
}

#[derive(Serialize, Deserialize)]
struct RawGene {
    #[serde(flatten)]
    gene: CellGene,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nodes: Option<Vec<NodeGene>>,
}

#[derive(Serialize, Deserialize)]
struct RawGenome {
    stage: u8,
    genes: Vec<RawGene>,
}

impl Genome {
    fn to_raw(&self) -> RawGenome {
        match self {
            Genome::Stage1(g) => RawGenome {
                stage: 1,
                genes: g.genes.iter().map(|&gene| RawGene { gene, nodes: None }).collect(),
            },
            Genome::Stage2(g) => RawGenome {
                stage: 2,
                genes: g
                    .genes
                    .iter()
                    .map(|s| RawGene { gene: s.gene, nodes: Some(s.graph.nodes.clone()) })
                    .collect(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_raw()).expect("genome serializes");
        s.push('\n');
        s
    }

    /// Parses without validating.
    pub fn from_json_unchecked(s: &str) -> Result<Genome, GenomeFileError> {
        Self::from_raw(serde_json::from_str(s)?)
    }

    fn from_raw(raw: RawGenome) -> Result<Genome, GenomeFileError> {
        match raw.stage {
            1 => {
                let mut genes = Vec::with_capacity(raw.genes.len());
                for (i, g) in raw.genes.into_iter().enumerate() {
                    if g.nodes.is_some() {
                        return Err(GenomeFileError::UnexpectedNodes { position: i + 1 });
                    }
                    genes.push(g.gene);
                }
                Ok(Genome::Stage1(Stage1Genome { genes }))
            }
            2 => {
                let mut genes = Vec::with_capacity(raw.genes.len());
                for (i, g) in raw.genes.into_iter().enumerate() {
                    let nodes = g.nodes.ok_or(GenomeFileError::MissingNodes { position: i + 1 })?;
                    genes.push(Stage2Gene { gene: g.gene, graph: CellGraph::new(nodes) });
                }
                Ok(Genome::Stage2(Stage2Genome { genes }))
            }
            other => Err(GenomeFileError::UnknownStage(other)),
        }
    }

    pub fn from_json(s: &str, lib: &CellLibrary, bounds: DepthBounds) -> Result<Genome, GenomeFileError> {
        let g = Self::from_json_unchecked(s)?;
        g.validate(lib, bounds)?;
        Ok(g)
    }
}

impl Serialize for Genome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_raw().serialize(s)
    }
}

/// Deserializes without validation.
impl<'de> Deserialize<'de> for Genome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Genome::from_raw(RawGenome::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

fn read_text(path: &Path) -> Result<String, GenomeFileError> {
    fs::read_to_string(path).map_err(|source| GenomeFileError::Io { path: path.display().to_string(), source })
}

/// Reads and validates a genome of either stage.
pub fn read_genome(
    path: impl AsRef<Path>,
    lib: &CellLibrary,
    bounds: DepthBounds,
) -> Result<Genome, GenomeFileError> {
    Genome::from_json(&read_text(path.as_ref())?, lib, bounds)
}

pub fn read_stage1(
    path: impl AsRef<Path>,
    lib: &CellLibrary,
    bounds: DepthBounds,
) -> Result<Stage1Genome, GenomeFileError> {
    match Genome::from_json_unchecked(&read_text(path.as_ref())?)? {
        Genome::Stage1(g) => {
            validate_stage1(&g, lib, bounds)?;
            Ok(g)
        }
        Genome::Stage2(_) => Err(GenomeFileError::StageMismatch { expected: 1, found: 2 }),
    }
}

pub fn read_stage2(
    path: impl AsRef<Path>,
    lib: &CellLibrary,
    bounds: DepthBounds,
) -> Result<Stage2Genome, GenomeFileError> {
    match Genome::from_json_unchecked(&read_text(path.as_ref())?)? {
        Genome::Stage2(g) => {
            validate_stage2(&g, lib, bounds)?;
            Ok(g)
        }
        Genome::Stage1(_) => Err(GenomeFileError::StageMismatch { expected: 2, found: 1 }),
    }
}

pub fn write_genome(path: impl AsRef<Path>, g: &Genome) -> Result<(), GenomeFileError> {
    let path = path.as_ref();
    fs::write(path, g.to_json()).map_err(|source| GenomeFileError::Io { path: path.display().to_string(), source })
}
