//! Two-stage genome representation.
//!
//! Stage 1 encodes a chain of `N` cells, each as `(prev, skip, cell_code)`:
//! cell `j` (1-based) always reads cell `j - 1` as its first input (index 0
//! is the network input layer) and any earlier layer except `j - 1` as its
//! second. Stage 2 keeps the same chain but carries an explicit, editable
//! DAG for every cell.

mod io;
mod network;

pub use io::{read_genome, read_stage1, read_stage2, write_genome, GenomeFileError};
pub use network::{
    decode_to_network, export_dot, DecodeConfig, DecodeError, Layer, LayerKind, NetEdge,
    NetworkGraph, Shape,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{validate_cell_graph, CellGraph, CellLibrary, CellType, GraphViolation};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellGene {
    pub prev: usize,
    pub skip: usize,
    #[serde(rename = "cell")]
    pub cell_code: u8,
}

impl CellGene {
    pub fn new(prev: usize, skip: usize, cell_code: u8) -> Self {
        CellGene { prev, skip, cell_code }
    }

    pub fn cell_type(&self) -> Option<CellType> {
        CellType::of_code(self.cell_code)
    }
}

/// Inclusive bounds on the number of cells in a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DepthBounds {
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for DepthBounds {
    fn default() -> Self {
        DepthBounds { n_min: 3, n_max: 12 }
    }
}

impl DepthBounds {
    pub fn new(n_min: usize, n_max: usize) -> Self {
        DepthBounds { n_min, n_max }
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.n_min..=self.n_max).contains(&n)
    }

    /// Largest number of Reduction cells population initialization can emit.
    pub fn reduction_cap(n: usize) -> usize {
        n / 2 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GenomeViolation {
    DepthOutOfRange { n: usize, bounds: DepthBounds },
    PrevNotPrevious { position: usize, prev: usize },
    FirstCellSkip { skip: usize },
    SkipEqualsPrevious { position: usize },
    SkipOutOfRange { position: usize, skip: usize },
    CellCodeOutOfRange { position: usize, code: u8 },
    TooManyReductions { count: usize, cap: usize },
    Cell { position: usize, violation: GraphViolation },
    TypeChanged { position: usize },
}

impl fmt::Display for GenomeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use GenomeViolation::*;
        match self {
            DepthOutOfRange { n, bounds } => write!(
                f,
                "depth out of range: N = {n}, allowed {}..={}",
                bounds.n_min, bounds.n_max
            ),
            PrevNotPrevious { position, prev } => write!(
                f,
                "cell {position}: first input is {prev}, must be the previous cell {}",
                position - 1
            ),
            FirstCellSkip { skip } => {
                write!(f, "cell 1: second input is {skip}, must be the input layer 0")
            }
            SkipEqualsPrevious { position } => {
                write!(f, "cell {position}: skip equals previous cell")
            }
            SkipOutOfRange { position, skip } => write!(
                f,
                "cell {position}: skip {skip} out of range 0..={}",
                position.saturating_sub(2)
            ),
            CellCodeOutOfRange { position, code } => {
                write!(f, "cell {position}: cell code {code} out of range 1..=8")
            }
            TooManyReductions { count, cap } => {
                write!(f, "too many reduction cells: {count} > {cap}")
            }
            Cell { position, violation } => write!(f, "cell {position}: {violation}"),
            TypeChanged { position } => {
                write!(f, "cell {position}: cell type differs from its template")
            }
        }
    }
}

/// Wraps a list of violations as an error.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", self.0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct Violations(pub Vec<GenomeViolation>);

impl Violations {
    fn into_result(self) -> Result<(), Violations> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(self)
        }
    }
}

fn check_chain(genes: &[CellGene], lib: &CellLibrary, bounds: DepthBounds) -> Vec<GenomeViolation> {
    let mut v = Vec::new();
    let n = genes.len();
    if !bounds.contains(n) {
        v.push(GenomeViolation::DepthOutOfRange { n, bounds });
    }
    for (i, g) in genes.iter().enumerate() {
        let position = i + 1;
        if g.prev != position - 1 {
            v.push(GenomeViolation::PrevNotPrevious { position, prev: g.prev });
        }
        if position == 1 {
            if g.skip != 0 {
                v.push(GenomeViolation::FirstCellSkip { skip: g.skip });
            }
        } else if g.skip == position - 1 {
            v.push(GenomeViolation::SkipEqualsPrevious { position });
        } else if g.skip > position - 2 {
            v.push(GenomeViolation::SkipOutOfRange { position, skip: g.skip });
        }
        if lib.cell_by_code(g.cell_code).is_err() {
            v.push(GenomeViolation::CellCodeOutOfRange { position, code: g.cell_code });
        }
    }
    let count = reduction_count(genes);
    let cap = DepthBounds::reduction_cap(n);
    if count > cap {
        v.push(GenomeViolation::TooManyReductions { count, cap });
    }
    v
}

fn reduction_count(genes: &[CellGene]) -> usize {
    genes.iter().filter(|g| g.cell_type() == Some(CellType::Reduction)).count()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Stage1Genome {
    pub genes: Vec<CellGene>,
}

impl Stage1Genome {
    pub fn new(genes: Vec<CellGene>) -> Self {
        Stage1Genome { genes }
    }

    /// Builds a chain from cell codes and skip inputs; `prev` is filled in.
    pub fn from_codes(codes_and_skips: &[(usize, u8)]) -> Self {
        let genes = codes_and_skips
            .iter()
            .enumerate()
            .map(|(i, &(skip, code))| CellGene::new(i, skip, code))
            .collect();
        Stage1Genome { genes }
    }

    pub fn depth(&self) -> usize {
        self.genes.len()
    }

    pub fn type_vector(&self) -> Vec<Option<CellType>> {
        self.genes.iter().map(CellGene::cell_type).collect()
    }

    pub fn reduction_count(&self) -> usize {
        reduction_count(&self.genes)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.genes.len() * 9 + 1);
        out.push(1);
        for g in &self.genes {
            push_gene(&mut out, g);
        }
        out
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(&self.canonical_bytes())
    }
}

fn push_gene(out: &mut Vec<u8>, g: &CellGene) {
    out.extend_from_slice(&(g.prev as u32).to_le_bytes());
    out.extend_from_slice(&(g.skip as u32).to_le_bytes());
    out.push(g.cell_code);
}

fn push_graph(out: &mut Vec<u8>, graph: &CellGraph) {
    let normalized = graph.normalized();
    out.push(normalized.nodes.len() as u8);
    for n in &normalized.nodes {
        out.extend_from_slice(&[n.in1, n.in2, n.op1, n.op2]);
    }
}

pub fn validate_stage1(
    g: &Stage1Genome,
    lib: &CellLibrary,
    bounds: DepthBounds,
) -> Result<(), Violations> {
    Violations(check_chain(&g.genes, lib, bounds)).into_result()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stage2Gene {
    #[serde(flatten)]
    pub gene: CellGene,
    #[serde(rename = "nodes")]
    pub graph: CellGraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Stage2Genome {
    pub genes: Vec<Stage2Gene>,
}

impl Stage2Genome {
    pub fn depth(&self) -> usize {
        self.genes.len()
    }

    pub fn chain(&self) -> Vec<CellGene> {
        self.genes.iter().map(|g| g.gene).collect()
    }

    pub fn type_vector(&self) -> Vec<Option<CellType>> {
        self.genes.iter().map(|g| g.gene.cell_type()).collect()
    }

    pub fn reduction_count(&self) -> usize {
        reduction_count(&self.chain())
    }

    /// Total live intermediate nodes across all cells.
    pub fn live_nodes(&self) -> usize {
        self.genes.iter().map(|g| g.graph.live_count()).sum()
    }

    /// Chain plus pruning-normalized cell graphs.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(2);
        for g in &self.genes {
            push_gene(&mut out, &g.gene);
            push_graph(&mut out, &g.graph);
        }
        out
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(&self.canonical_bytes())
    }
}

pub fn validate_stage2(
    g: &Stage2Genome,
    lib: &CellLibrary,
    bounds: DepthBounds,
) -> Result<(), Violations> {
    let chain = g.chain();
    let mut v = check_chain(&chain, lib, bounds);
    for (i, gene) in g.genes.iter().enumerate() {
        let position = i + 1;
        if let Err(errs) = validate_cell_graph(&gene.graph) {
            v.extend(errs.into_iter().map(|violation| GenomeViolation::Cell { position, violation }));
        }
        if let Ok(t) = lib.cell_by_code(gene.gene.cell_code) {
            if Some(t.cell_type) != gene.gene.cell_type() {
                v.push(GenomeViolation::TypeChanged { position });
            }
        }
    }
    Violations(v).into_result()
}

/// Replaces every cell code by a private copy of its template graph.
pub fn expand_to_stage2(
    g: &Stage1Genome,
    lib: &CellLibrary,
    bounds: DepthBounds,
) -> Result<Stage2Genome, Violations> {
    validate_stage1(g, lib, bounds)?;
    let genes = g
        .genes
        .iter()
        .map(|gene| Stage2Gene {
            gene: *gene,
            graph: lib.cell_by_code(gene.cell_code).expect("validated").graph.clone(),
        })
        .collect();
    Ok(Stage2Genome { genes })
}

/// Weight-store key of one cell: its template code plus a digest of its
/// pruning-normalized DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StructuralKey {
    pub cell_code: u8,
    pub graph_hash: u64,
}

impl StructuralKey {
    pub fn of(cell_code: u8, graph: &CellGraph) -> Self {
        let mut bytes = Vec::new();
        push_graph(&mut bytes, graph);
        StructuralKey { cell_code, graph_hash: fnv1a64(&bytes) }
    }

    /// 18 lowercase hex digits: code then graph hash.
    pub fn to_hex(&self) -> String {
        format!("{:02x}{:016x}", self.cell_code, self.graph_hash)
    }
}

impl fmt::Display for StructuralKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid structural key {0:?}: expected 18 hex digits")]
pub struct KeyParseError(pub String);

impl FromStr for StructuralKey {
    type Err = KeyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || KeyParseError(s.to_string());
        if s.len() != 18 || !s.is_ascii() {
            return Err(err());
        }
        let cell_code = u8::from_str_radix(&s[..2], 16).map_err(|_| err())?;
        let graph_hash = u64::from_str_radix(&s[2..], 16).map_err(|_| err())?;
        Ok(StructuralKey { cell_code, graph_hash })
    }
}

impl Serialize for StructuralKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for StructuralKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Key of the cell at `position` (0-based).
///
/// # Panics
/// If `position` is out of range.
pub fn structural_key(position: usize, g: &Stage2Genome) -> StructuralKey {
    let gene = &g.genes[position];
    StructuralKey::of(gene.gene.cell_code, &gene.graph)
}

/// Either stage of genome.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Genome {
    Stage1(Stage1Genome),
    Stage2(Stage2Genome),
}

impl Genome {
    pub fn stage(&self) -> u8 {
        match self {
            Genome::Stage1(_) => 1,
            Genome::Stage2(_) => 2,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Genome::Stage1(g) => g.depth(),
            Genome::Stage2(g) => g.depth(),
        }
    }

    pub fn type_vector(&self) -> Vec<Option<CellType>> {
        match self {
            Genome::Stage1(g) => g.type_vector(),
            Genome::Stage2(g) => g.type_vector(),
        }
    }

    pub fn digest(&self) -> u64 {
        match self {
            Genome::Stage1(g) => g.digest(),
            Genome::Stage2(g) => g.digest(),
        }
    }

    /// Live intermediate nodes; stage-1 genomes count their templates' nodes.
    pub fn live_nodes(&self, lib: &CellLibrary) -> usize {
        match self {
            Genome::Stage1(g) => g
                .genes
                .iter()
                .filter_map(|c| lib.cell_by_code(c.cell_code).ok())
                .map(|t| t.graph.live_count())
                .sum(),
            Genome::Stage2(g) => g.live_nodes(),
        }
    }

    pub fn validate(&self, lib: &CellLibrary, bounds: DepthBounds) -> Result<(), Violations> {
        match self {
            Genome::Stage1(g) => validate_stage1(g, lib, bounds),
            Genome::Stage2(g) => validate_stage2(g, lib, bounds),
        }
    }

    /// Stage-2 form used for evaluation: stage-1 genomes are expanded.
    pub fn to_stage2(&self, lib: &CellLibrary, bounds: DepthBounds) -> Result<Stage2Genome, Violations> {
        match self {
            Genome::Stage1(g) => expand_to_stage2(g, lib, bounds),
            Genome::Stage2(g) => {
                validate_stage2(g, lib, bounds)?;
                Ok(g.clone())
            }
        }
    }
}
