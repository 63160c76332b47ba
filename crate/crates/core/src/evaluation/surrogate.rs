use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRequest, EvalResponse, Evaluator, RequestKind};
use crate::genome::{
    decode_to_network, fnv1a64, validate_stage2, DecodeConfig, DepthBounds, Stage2Genome, Violations,
};
use crate::search_space::{CellLibrary, OpType, FIRST_INTERMEDIATE};

/// Weights and target depth of the training-free fitness landscape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub w_depth: f64,
    pub w_div: f64,
    pub w_ops: f64,
    pub w_noise: f64,
    pub target_depth: usize,
    /// Forces the noise term to 0, for analytic tests.
    pub pin_noise: bool,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { w_depth: 0.35, w_div: 0.25, w_ops: 0.25, w_noise: 0.15, target_depth: 8, pin_noise: false }
    }
}

impl SurrogateConfig {
    pub fn check(&self) -> Result<(), String> {
        let ws = [self.w_depth, self.w_div, self.w_ops, self.w_noise];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("surrogate weights must be finite and non-negative".into());
        }
        let sum: f64 = ws.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("surrogate weights sum to {sum}, expected 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTerms {
    pub depth: f64,
    pub diversity: f64,
    pub ops: f64,
    pub noise: f64,
    pub fitness: f64,
}

/// Computes every term without validating the genome. Terms are clamped to
/// [0, 1].
pub fn surrogate_terms(
    g: &Stage2Genome,
    lib: &CellLibrary,
    cfg: &SurrogateConfig,
    bounds: DepthBounds,
) -> SurrogateTerms {
    let n = g.depth() as f64;
    let span = bounds.n_max.saturating_sub(bounds.n_min).max(1) as f64;
    let depth = (1.0 - (n - cfg.target_depth as f64).abs() / span).clamp(0.0, 1.0);

    let codes: BTreeSet<u8> = g.genes.iter().map(|s| s.gene.cell_code).collect();
    let diversity = (codes.len() as f64 / 8.0).clamp(0.0, 1.0);

    let mut live_edges = 0usize;
    let mut conv_edges = 0usize;
    for s in &g.genes {
        for i in s.graph.live_nodes() {
            for op in s.graph.nodes[i - FIRST_INTERMEDIATE].ops() {
                live_edges += 1;
                if matches!(lib.op_by_code(op), Ok(d) if d.op_type == OpType::Convolution) {
                    conv_edges += 1;
                }
            }
        }
    }
    let ops = if live_edges == 0 { 0.0 } else { conv_edges as f64 / live_edges as f64 };

    let noise = if cfg.pin_noise { 0.0 } else { (fnv1a64(&g.canonical_bytes()) % 1000) as f64 / 999.0 };

    let fitness = (cfg.w_depth * depth + cfg.w_div * diversity + cfg.w_ops * ops + cfg.w_noise * noise).clamp(0.0, 1.0);
    SurrogateTerms { depth, diversity, ops, noise, fitness }
}

/// Deterministic, training-free fitness of a valid stage-2 genome.
pub fn surrogate_fitness(
    g: &Stage2Genome,
    lib: &CellLibrary,
    cfg: &SurrogateConfig,
    bounds: DepthBounds,
) -> Result<f64, Violations> {
    validate_stage2(g, lib, bounds)?;
    Ok(surrogate_terms(g, lib, cfg, bounds).fitness)
}

/// Evaluator backend that ignores weights and answers with the surrogate
/// landscape. Blob updates are empty payloads, one per structural key, so
/// the weight-store bookkeeping runs exactly as with a real trainer.
#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    pub lib: CellLibrary,
    pub cfg: SurrogateConfig,
    pub bounds: DepthBounds,
    pub decode: DecodeConfig,
}

impl SurrogateEvaluator {
    pub fn new(lib: CellLibrary, cfg: SurrogateConfig, bounds: DepthBounds, decode: DecodeConfig) -> Self {
        SurrogateEvaluator { lib, cfg, bounds, decode }
    }

    fn answer(&self, req: &EvalRequest) -> EvalResponse {
        if req.kind == RequestKind::Evaluate {
            if let Err(v) = validate_stage2(&req.genome, &self.lib, self.bounds) {
                return EvalResponse::failure(req.id, v.to_string());
            }
        }
        let terms = surrogate_terms(&req.genome, &self.lib, &self.cfg, self.bounds);
        let params = match decode_to_network(&req.genome, &self.lib, &self.decode) {
            Ok(net) => net.estimate_params(),
            Err(e) => return EvalResponse::failure(req.id, e.to_string()),
        };
        let blobs = req.keys().into_iter().map(|k| (k, Vec::new())).collect();
        EvalResponse::success(req.id, terms.fitness, params, blobs)
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate_batch(&mut self, requests: &[EvalRequest]) -> Result<Vec<EvalResponse>, EvalError> {
        Ok(requests.iter().map(|r| self.answer(r)).collect())
    }
}
