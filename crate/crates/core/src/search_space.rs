//! Operation space, cell-template library and structural validation of cell DAGs.
//!
//! A cell has two input nodes (indices 0 and 1), an ordered list of
//! intermediate nodes (index `k + 2` for the `k`-th entry) and one output node
//! that element-wise adds every live intermediate node nobody else consumes.
//! Each intermediate node is a 4-tuple `(in1, in2, op1, op2)`; the all-zero
//! tuple marks a pruned node.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of entries in the operation space.
pub const NUM_OPERATIONS: u8 = 13;
/// Number of cell templates in the library.
pub const NUM_CELLS: u8 = 8;
/// Index of the first intermediate node in a cell.
pub const FIRST_INTERMEDIATE: usize = 2;

const DEFAULT_LIBRARY: &str = include_str!("../data/cell_library.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpType {
    None,
    Convolution,
    Pooling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationDescriptor {
    pub code: u8,
    pub name: String,
    #[serde(rename = "type")]
    pub op_type: OpType,
    pub abbreviation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Normal,
    Reduction,
}

impl CellType {
    /// Codes 1..=4 are Normal cells, 5..=8 Reduction cells.
    pub fn of_code(code: u8) -> Option<CellType> {
        match code {
            1..=4 => Some(CellType::Normal),
            5..=8 => Some(CellType::Reduction),
            _ => None,
        }
    }

    /// All cell codes of this type, ascending.
    pub fn codes(self) -> std::ops::RangeInclusive<u8> {
        match self {
            CellType::Normal => 1..=4,
            CellType::Reduction => 5..=8,
        }
    }

    /// Spatial stride applied by a cell of this type.
    pub fn stride(self) -> u32 {
        match self {
            CellType::Normal => 1,
            CellType::Reduction => 2,
        }
    }

    /// Output channels relative to the cell's first input.
    pub fn channel_multiplier(self) -> u32 {
        self.stride()
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellType::Normal => f.write_str("Normal"),
            CellType::Reduction => f.write_str("Reduction"),
        }
    }
}

/// One intermediate node: two input node indices and the operation applied to each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(from = "[u8; 4]", into = "[u8; 4]")]
pub struct NodeGene {
    pub in1: u8,
    pub in2: u8,
    pub op1: u8,
    pub op2: u8,
}

impl NodeGene {
    pub const PRUNED: NodeGene = NodeGene { in1: 0, in2: 0, op1: 0, op2: 0 };

    pub fn new(in1: u8, in2: u8, op1: u8, op2: u8) -> Self {
        NodeGene { in1, in2, op1, op2 }
    }

    pub fn is_pruned(&self) -> bool {
        *self == Self::PRUNED
    }

    pub fn inputs(&self) -> [u8; 2] {
        [self.in1, self.in2]
    }

    pub fn ops(&self) -> [u8; 2] {
        [self.op1, self.op2]
    }
}

impl From<[u8; 4]> for NodeGene {
    fn from(v: [u8; 4]) -> Self {
        NodeGene::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NodeGene> for [u8; 4] {
    fn from(n: NodeGene) -> Self {
        [n.in1, n.in2, n.op1, n.op2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GraphViolation {
    EmptyCell,
    Acyclicity { node: usize, input: usize },
    DanglingInput { node: usize, input: usize },
    BadOpCode { node: usize, code: u8 },
}

impl fmt::Display for GraphViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphViolation::EmptyCell => f.write_str("empty cell: no live intermediate node"),
            GraphViolation::Acyclicity { node, input } => write!(
                f,
                "acyclicity violation: node {node} reads from node {input}, which is not earlier"
            ),
            GraphViolation::DanglingInput { node, input } => {
                write!(f, "dangling input: node {node} reads from pruned node {input}")
            }
            GraphViolation::BadOpCode { node, code } => {
                write!(f, "bad op code {code} on node {node} (expected 1..=13)")
            }
        }
    }
}

/// Cell DAG. Input nodes 0 and 1 are implicit; the output node index is
/// `nodes.len() + 2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellGraph {
    pub nodes: Vec<NodeGene>,
}

impl CellGraph {
    pub fn new(nodes: Vec<NodeGene>) -> Self {
        CellGraph { nodes }
    }

    pub fn output_index(&self) -> usize {
        self.nodes.len() + FIRST_INTERMEDIATE
    }

    pub fn node(&self, index: usize) -> Option<&NodeGene> {
        index.checked_sub(FIRST_INTERMEDIATE).and_then(|k| self.nodes.get(k))
    }

    /// Node indices of live intermediate nodes, ascending.
    pub fn live_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.is_pruned())
            .map(|(k, _)| k + FIRST_INTERMEDIATE)
            .collect()
    }

    pub fn live_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_pruned()).count()
    }

    /// Number of operation-carrying edges (two per live node).
    pub fn live_edge_count(&self) -> usize {
        2 * self.live_count()
    }

    /// Live intermediate nodes with no live consumer; the output node adds these.
    pub fn output_set(&self) -> Vec<usize> {
        let mut consumed = vec![false; self.output_index()];
        for n in self.nodes.iter().filter(|n| !n.is_pruned()) {
            for i in n.inputs() {
                if let Some(c) = consumed.get_mut(i as usize) {
                    *c = true;
                }
            }
        }
        self.live_nodes().into_iter().filter(|&i| !consumed[i]).collect()
    }

    /// Drops pruned rows and renumbers the remaining nodes densely.
    ///
    /// Only meaningful on graphs without dangling inputs.
    pub fn normalized(&self) -> CellGraph {
        let mut remap = vec![0u8; self.output_index()];
        remap[0] = 0;
        remap[1] = 1;
        let mut next = FIRST_INTERMEDIATE as u8;
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (k, n) in self.nodes.iter().enumerate() {
            if n.is_pruned() {
                continue;
            }
            remap[k + FIRST_INTERMEDIATE] = next;
            next += 1;
            let map = |i: u8| remap.get(i as usize).copied().unwrap_or(i);
            nodes.push(NodeGene::new(map(n.in1), map(n.in2), n.op1, n.op2));
        }
        CellGraph { nodes }
    }
}

/// Checks the structural rules of a cell DAG, collecting every violation.
pub fn validate_cell_graph(g: &CellGraph) -> Result<(), Vec<GraphViolation>> {
    let mut violations = Vec::new();
    for (k, n) in g.nodes.iter().enumerate() {
        let index = k + FIRST_INTERMEDIATE;
        if n.is_pruned() {
            continue;
        }
        for code in n.ops() {
            if !(1..=NUM_OPERATIONS).contains(&code) {
                violations.push(GraphViolation::BadOpCode { node: index, code });
            }
        }
        for input in n.inputs() {
            let input = input as usize;
            if input >= index {
                violations.push(GraphViolation::Acyclicity { node: index, input });
            } else if g.node(input).is_some_and(NodeGene::is_pruned) {
                violations.push(GraphViolation::DanglingInput { node: index, input });
            }
        }
    }
    if g.live_count() == 0 {
        violations.push(GraphViolation::EmptyCell);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellTemplate {
    pub code: u8,
    pub name: String,
    pub abbreviation: String,
    pub cell_type: CellType,
    pub graph: CellGraph,
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    code: u8,
    name: String,
    abbreviation: String,
    #[serde(rename = "type")]
    cell_type: CellType,
    nodes: Vec<NodeGene>,
}

#[derive(Serialize, Deserialize)]
struct LibraryRecord {
    operations: Vec<OperationDescriptor>,
    cells: Vec<CellRecord>,
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("failed to read cell library {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse cell library: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("expected 13 operations, found {0}")]
    OperationCount(usize),
    #[error("operation at position {position} has code {code}, expected {}", position + 1)]
    OperationCode { position: usize, code: u8 },
    #[error("operation 1 must be the identity (type none)")]
    IdentityType,
    #[error("expected 8 cell templates, found {0}")]
    CellCount(usize),
    #[error("cell at position {position} has code {code}, expected {}", position + 1)]
    CellCode { position: usize, code: u8 },
    #[error("cell {code} is tagged {found} but codes 1..=4 are Normal and 5..=8 Reduction")]
    CellTypeMismatch { code: u8, found: CellType },
    #[error("cell {code} ({name}) is invalid: {}", join(violations))]
    InvalidCell { code: u8, name: String, violations: Vec<GraphViolation> },
    #[error("operation code {0} out of range 1..=13")]
    OpCodeOutOfRange(u8),
    #[error("cell code {0} out of range 1..=8")]
    CellCodeOutOfRange(u8),
}

fn join(v: &[GraphViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// The 13 operations and 8 cell templates that make up the search space.
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLibrary {
    operations: Vec<OperationDescriptor>,
    cells: Vec<CellTemplate>,
}

impl Default for CellLibrary {
    fn default() -> Self {
        CellLibrary::from_json_str(DEFAULT_LIBRARY).expect("bundled cell library is valid")
    }
}

impl CellLibrary {
    pub fn new(
        operations: Vec<OperationDescriptor>,
        cells: Vec<CellTemplate>,
    ) -> Result<Self, LibraryError> {
        if operations.len() != NUM_OPERATIONS as usize {
            return Err(LibraryError::OperationCount(operations.len()));
        }
        for (position, op) in operations.iter().enumerate() {
            if op.code as usize != position + 1 {
                return Err(LibraryError::OperationCode { position, code: op.code });
            }
        }
        if operations[0].op_type != OpType::None {
            return Err(LibraryError::IdentityType);
        }
        if cells.len() != NUM_CELLS as usize {
            return Err(LibraryError::CellCount(cells.len()));
        }
        for (position, cell) in cells.iter().enumerate() {
            if cell.code as usize != position + 1 {
                return Err(LibraryError::CellCode { position, code: cell.code });
            }
            if CellType::of_code(cell.code) != Some(cell.cell_type) {
                return Err(LibraryError::CellTypeMismatch { code: cell.code, found: cell.cell_type });
            }
            validate_cell_graph(&cell.graph).map_err(|violations| LibraryError::InvalidCell {
                code: cell.code,
                name: cell.name.clone(),
                violations,
            })?;
        }
        Ok(CellLibrary { operations, cells })
    }

    pub fn from_json_str(s: &str) -> Result<Self, LibraryError> {
        let record: LibraryRecord = serde_json::from_str(s)?;
        let cells = record
            .cells
            .into_iter()
            .map(|c| CellTemplate {
                code: c.code,
                name: c.name,
                abbreviation: c.abbreviation,
                cell_type: c.cell_type,
                graph: CellGraph::new(c.nodes),
            })
            .collect();
        CellLibrary::new(record.operations, cells)
    }

    /// Loads and validates a library file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LibraryError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|source| LibraryError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    /// Canonical pretty-printed JSON form.
    pub fn to_canonical_json(&self) -> String {
        let record = LibraryRecord {
            operations: self.operations.clone(),
            cells: self
                .cells
                .iter()
                .map(|c| CellRecord {
                    code: c.code,
                    name: c.name.clone(),
                    abbreviation: c.abbreviation.clone(),
                    cell_type: c.cell_type,
                    nodes: c.graph.nodes.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&record).expect("library serializes")
    }

    pub fn operations(&self) -> &[OperationDescriptor] {
        &self.operations
    }

    pub fn cells(&self) -> &[CellTemplate] {
        &self.cells
    }

    pub fn op_by_code(&self, code: u8) -> Result<&OperationDescriptor, LibraryError> {
        match code {
            1..=NUM_OPERATIONS => Ok(&self.operations[code as usize - 1]),
            _ => Err(LibraryError::OpCodeOutOfRange(code)),
        }
    }

    pub fn cell_by_code(&self, code: u8) -> Result<&CellTemplate, LibraryError> {
        match code {
            1..=NUM_CELLS => Ok(&self.cells[code as usize - 1]),
            _ => Err(LibraryError::CellCodeOutOfRange(code)),
        }
    }
}
