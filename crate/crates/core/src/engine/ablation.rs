use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AblationMode, Engine, EngineError, SearchConfig};
use crate::evaluation::Evaluator;
use crate::search_space::CellLibrary;

/// Builds a fresh evaluator for one run's config.
pub type EvaluatorFactory<'a> = dyn FnMut(&SearchConfig) -> Result<Box<dyn Evaluator>, EngineError> + 'a;

/// Final-best statistics of one variant over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub sd: f64,
    pub finals: Vec<f64>,
    /// Per-generation best fitness averaged over seeds.
    pub trajectory: Vec<f64>,
}

impl VariantSummary {
    fn new(name: &str, finals: Vec<f64>, trajectories: &[Vec<f64>]) -> Self {
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n.max(1.0);
        let sd = if finals.len() < 2 {
            0.0
        } else {
            (finals.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let len = trajectories.iter().map(Vec::len).min().unwrap_or(0);
        let trajectory = (0..len)
            .map(|g| trajectories.iter().map(|t| t[g]).sum::<f64>() / trajectories.len() as f64)
            .collect();
        VariantSummary { name: name.to_string(), mean, sd, finals, trajectory }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub seeds: Vec<u64>,
    pub baseline: VariantSummary,
    pub ablated: VariantSummary,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ablation: {} over {} seeds", self.mode, self.seeds.len());
        for v in [&self.baseline, &self.ablated] {
            let _ = writeln!(out, "{:<24} best fitness {:.6} ± {:.6}", v.name, v.mean, v.sd);
        }
        let _ = writeln!(out, "difference (full − ablated): {:+.6}", self.baseline.mean - self.ablated.mean);
        let _ = writeln!(out, "generation,{},{}", self.baseline.name, self.ablated.name);
        let len = self.baseline.trajectory.len().max(self.ablated.trajectory.len());
        for g in 0..len {
            let cell = |t: &[f64]| t.get(g).map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", g + 1, cell(&self.baseline.trajectory), cell(&self.ablated.trajectory));
        }
        out
    }
}

/// Runs the full algorithm and the `mode` ablation on seeds
/// `cfg.seed, cfg.seed + 1, ..` and compares final best fitness.
pub fn ablate(
    cfg: &SearchConfig,
    mode: AblationMode,
    runs: usize,
    lib: &CellLibrary,
    make_evaluator: &mut EvaluatorFactory<'_>,
) -> Result<AblationReport, EngineError> {
    if runs == 0 {
        return Err(EngineError::Config("ablation needs at least one run".into()));
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let variants = [("full", cfg.variant), (mode.name(), mode.apply(cfg.variant))];
    let mut summaries = Vec::with_capacity(2);
    for (name, variant) in variants {
        let mut finals = Vec::with_capacity(runs);
        let mut trajectories = Vec::with_capacity(runs);
        for &seed in &seeds {
            let run_cfg = SearchConfig { seed, variant, ..cfg.clone() };
            let mut ev = make_evaluator(&run_cfg)?;
            let result = Engine::new(run_cfg, lib.clone())?.run(ev.as_mut(), None)?;
            finals.push(result.best.score());
            trajectories.push(result.history.iter().map(|r| r.best).collect::<Vec<_>>());
        }
        summaries.push(VariantSummary::new(name, finals, &trajectories));
    }
    let ablated = summaries.pop().expect("two variants");
    let baseline = summaries.pop().expect("two variants");
    Ok(AblationReport { mode, seeds, baseline, ablated })
}
