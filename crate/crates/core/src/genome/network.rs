//! Decoding a stage-2 genome into a shape-annotated layer graph, plus DOT export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Stage2Genome;
use crate::search_space::{CellLibrary, CellType, FIRST_INTERMEDIATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
}

impl Shape {
    pub fn new(height: u32, width: u32, channels: u32) -> Self {
        Shape { height, width, channels }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub input_shape: Shape,
    pub stem_channels: u32,
    pub num_classes: u32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { input_shape: Shape::new(32, 32, 3), stem_channels: 16, num_classes: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    /// 3×3 convolution from the input image to `stem_channels`.
    Stem,
    /// 1×1 convolution aligning a skip input with the cell's first input.
    Projection { cell: usize, stride: u32 },
    /// Intermediate node `node` of cell `cell` (1-based position).
    CellNode { cell: usize, node: usize },
    /// Element-wise sum of a cell's sink nodes.
    CellOutput { cell: usize },
    GlobalPool,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub id: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub label: String,
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetEdge {
    pub from: usize,
    pub to: usize,
    /// Operation code for edges inside a cell; `None` for plumbing edges.
    pub op: Option<u8>,
}

/// Cell descriptor kept alongside the layers for export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellInfo {
    pub position: usize,
    pub code: u8,
    pub abbreviation: String,
    pub cell_type: CellType,
}

/// Layers in topological order (every edge goes from a lower to a higher id).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub layers: Vec<Layer>,
    pub edges: Vec<NetEdge>,
    pub cells: Vec<CellInfo>,
    op_abbreviations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input shape {0} has a zero dimension")]
    EmptyInput(Shape),
    #[error("cell {position}: cannot align skip input of shape {skip} with {prev}")]
    Misaligned { position: usize, skip: Shape, prev: Shape },
    #[error("cell {position}: channel count overflows")]
    ChannelOverflow { position: usize },
    #[error("cell {position}: {reason}")]
    Invalid { position: usize, reason: String },
}

impl NetworkGraph {
    fn push(&mut self, kind: LayerKind, label: String, shape: Shape) -> usize {
        let id = self.layers.len();
        self.layers.push(Layer { id, kind, label, shape });
        id
    }

    fn connect(&mut self, from: usize, to: usize, op: Option<u8>) {
        self.edges.push(NetEdge { from, to, op });
    }

    pub fn input(&self) -> &Layer {
        &self.layers[0]
    }

    /// The feature map entering the classifier head.
    pub fn pre_head(&self) -> &Layer {
        &self.layers[self.layers.len() - 3]
    }

    pub fn output(&self) -> &Layer {
        self.layers.last().expect("decoded graph is never empty")
    }

    pub fn cell_output(&self, position: usize) -> Option<&Layer> {
        self.layers.iter().find(|l| l.kind == LayerKind::CellOutput { cell: position })
    }

    pub fn projection_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Projection { .. })).count()
    }

    pub fn op_abbreviation(&self, code: u8) -> &str {
        &self.op_abbreviations[code as usize - 1]
    }

    /// Rough trainable-parameter count of the decoded network.
    pub fn estimate_params(&self) -> u64 {
        let mut total = 0u64;
        for e in &self.edges {
            let src = &self.layers[e.from];
            let dst = &self.layers[e.to];
            let cin = src.shape.channels as u64;
            let cout = dst.shape.channels as u64;
            let resize = src.shape != dst.shape;
            total += match (&dst.kind, e.op) {
                (LayerKind::Stem, _) => 9 * cin * cout,
                (LayerKind::Projection { .. }, _) => cin * cout,
                (LayerKind::Linear, _) => cin * cout + cout,
                (_, Some(op)) => op_params(op, cin, cout, resize),
                _ => 0,
            };
        }
        total
    }
}

fn op_params(op: u8, cin: u64, cout: u64, resize: bool) -> u64 {
    let adapt = if resize { cin * cout } else { 0 };
    match op {
        1 => adapt,
        2 => 3 * cin * cout + 3 * cout * cout,
        3 => 7 * cin * cout + 7 * cout * cout,
        4 => 9 * cin * cout,
        5..=8 => adapt,
        9 => cin * cout,
        10 => 9 * cin * cout,
        11 => 9 * cin + cin * cout,
        12 => 25 * cin + cin * cout,
        13 => 49 * cin + cin * cout,
        _ => 0,
    }
}

fn halve(x: u32) -> u32 {
    x.div_ceil(2)
}

/// Resolves every layer shape of the network a stage-2 genome describes.
///
/// Layer 0 is the input image, layer 1 the stem; chain index 0 refers to the
/// stem output. Reduction cells halve height and width (rounding up) and
/// double channels. A skip input whose shape differs from the first input
/// passes through a strided 1×1 projection.
pub fn decode_to_network(
    g: &Stage2Genome,
    lib: &CellLibrary,
    cfg: &DecodeConfig,
) -> Result<NetworkGraph, DecodeError> {
    let input = cfg.input_shape;
    if input.height == 0 || input.width == 0 || input.channels == 0 || cfg.stem_channels == 0 {
        return Err(DecodeError::EmptyInput(input));
    }
    let mut net = NetworkGraph {
        layers: Vec::new(),
        edges: Vec::new(),
        cells: Vec::new(),
        op_abbreviations: lib.operations().iter().map(|o| o.abbreviation.clone()).collect(),
    };
    let input_id = net.push(LayerKind::Input, "input".into(), input);
    let stem_shape = Shape::new(input.height, input.width, cfg.stem_channels);
    let stem_id = net.push(LayerKind::Stem, "stem conv3".into(), stem_shape);
    net.connect(input_id, stem_id, None);

    // layer id and reduction depth of every chain index
    let mut chain: Vec<(usize, u32)> = vec![(stem_id, 0)];
    for (i, gene) in g.genes.iter().enumerate() {
        let position = i + 1;
        let invalid = |reason: String| DecodeError::Invalid { position, reason };
        let template = lib
            .cell_by_code(gene.gene.cell_code)
            .map_err(|e| invalid(e.to_string()))?;
        let &(prev_id, prev_depth) = chain
            .get(gene.gene.prev)
            .ok_or_else(|| invalid(format!("first input {} not yet computed", gene.gene.prev)))?;
        let &(skip_id, skip_depth) = chain
            .get(gene.gene.skip)
            .ok_or_else(|| invalid(format!("second input {} not yet computed", gene.gene.skip)))?;
        let prev_shape = net.layers[prev_id].shape;
        let skip_shape = net.layers[skip_id].shape;

        let mut second = skip_id;
        if skip_shape != prev_shape {
            let levels = prev_depth.saturating_sub(skip_depth);
            let stride = 1u32.checked_shl(levels).ok_or(DecodeError::ChannelOverflow { position })?;
            let aligned = skip_shape.height.div_ceil(stride) == prev_shape.height
                && skip_shape.width.div_ceil(stride) == prev_shape.width;
            if !aligned {
                return Err(DecodeError::Misaligned { position, skip: skip_shape, prev: prev_shape });
            }
            second = net.push(
                LayerKind::Projection { cell: position, stride },
                format!("proj conv1/s{stride}"),
                prev_shape,
            );
            net.connect(skip_id, second, None);
        }

        let (out_shape, depth) = match template.cell_type {
            CellType::Normal => (prev_shape, prev_depth),
            CellType::Reduction => {
                let channels = prev_shape
                    .channels
                    .checked_mul(2)
                    .ok_or(DecodeError::ChannelOverflow { position })?;
                (Shape::new(halve(prev_shape.height), halve(prev_shape.width), channels), prev_depth + 1)
            }
        };

        let graph = &gene.graph;
        let mut node_layer = vec![usize::MAX; graph.output_index()];
        node_layer[0] = prev_id;
        node_layer[1] = second;
        for index in graph.live_nodes() {
            let node = graph.nodes[index - FIRST_INTERMEDIATE];
            let id = net.push(
                LayerKind::CellNode { cell: position, node: index },
                format!("c{position}.n{index}"),
                out_shape,
            );
            for (input, op) in node.inputs().into_iter().zip(node.ops()) {
                let src = node_layer
                    .get(input as usize)
                    .copied()
                    .filter(|&s| s != usize::MAX)
                    .ok_or_else(|| invalid(format!("node {index} reads undefined node {input}")))?;
                net.connect(src, id, Some(op));
            }
            node_layer[index] = id;
        }
        let sinks = graph.output_set();
        if sinks.is_empty() {
            return Err(invalid("cell has no live node".into()));
        }
        let out_id = net.push(LayerKind::CellOutput { cell: position }, format!("c{position}.add"), out_shape);
        for s in sinks {
            net.connect(node_layer[s], out_id, None);
        }
        net.cells.push(CellInfo {
            position,
            code: template.code,
            abbreviation: template.abbreviation.clone(),
            cell_type: template.cell_type,
        });
        chain.push((out_id, depth));
    }

    let last = chain.last().expect("chain holds the stem").0;
    let channels = net.layers[last].shape.channels;
    let pool = net.push(LayerKind::GlobalPool, "global avg pool".into(), Shape::new(1, 1, channels));
    net.connect(last, pool, None);
    let linear = net.push(LayerKind::Linear, "linear".into(), Shape::new(1, 1, cfg.num_classes));
    net.connect(pool, linear, None);
    Ok(net)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering with one cluster per cell; edge labels carry operation
/// abbreviations.
pub fn export_dot(n: &NetworkGraph) -> String {
    let mut out = String::new();
    out.push_str("digraph network {\n");
    out.push_str("  rankdir=TB;\n");
    out.push_str("  node [shape=box, fontname=\"Helvetica\"];\n");
    let node_line = |out: &mut String, l: &Layer, indent: &str| {
        let _ = writeln!(out, "{indent}n{} [label=\"{}\\n{}\"];", l.id, escape(&l.label), l.shape);
    };
    for l in &n.layers {
        if !matches!(
            l.kind,
            LayerKind::CellNode { .. } | LayerKind::CellOutput { .. } | LayerKind::Projection { .. }
        ) {
            node_line(&mut out, l, "  ");
        }
    }
    for cell in &n.cells {
        let _ = writeln!(out, "  subgraph cluster_cell{} {{", cell.position);
        let _ = writeln!(
            out,
            "    label=\"cell {}: {} ({})\";",
            cell.position,
            escape(&cell.abbreviation),
            cell.cell_type
        );
        for l in &n.layers {
            let owner = match l.kind {
                LayerKind::CellNode { cell, .. }
                | LayerKind::CellOutput { cell }
                | LayerKind::Projection { cell, .. } => cell,
                _ => continue,
            };
            if owner == cell.position {
                node_line(&mut out, l, "    ");
            }
        }
        out.push_str("  }\n");
    }
    for e in &n.edges {
        match e.op {
            Some(op) => {
                let _ = writeln!(
                    out,
                    "  n{} -> n{} [label=\"{}\"];",
                    e.from,
                    e.to,
                    escape(n.op_abbreviation(op))
                );
            }
            None => {
                let _ = writeln!(out, "  n{} -> n{};", e.from, e.to);
            }
        }
    }
    out.push_str("}\n");
    out
}
