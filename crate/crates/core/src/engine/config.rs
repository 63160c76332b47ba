use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::evaluation::SurrogateConfig;
use crate::evolution::{CrossoverMode, FineMutationMode};
use crate::genome::{fnv1a64, DecodeConfig, DepthBounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Surrogate,
    External,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surrogate" => Ok(Backend::Surrogate),
            "external" => Ok(Backend::External),
            other => Err(format!("unknown backend {other:?} (expected surrogate or external)")),
        }
    }
}

/// Switches for the operator and stage ablations. The default is the full
/// algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub fine_stage: bool,
    pub weight_inheritance: bool,
    pub crossover: CrossoverMode,
    pub cell_mutation: bool,
    pub connect_mutation: bool,
    pub fine_mutation: FineMutationMode,
    pub pruning: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            fine_stage: true,
            weight_inheritance: true,
            crossover: CrossoverMode::MultiPoint,
            cell_mutation: true,
            connect_mutation: true,
            fine_mutation: FineMutationMode::Both,
            pruning: true,
        }
    }
}

/// Search parameters. Field names may also be given in their short
/// algorithmic form (`P`, `T0`, `S`, `T1`, `gamma`, `beta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(alias = "P")]
    pub population_size: usize,
    #[serde(alias = "T0")]
    pub rough_generations: usize,
    #[serde(alias = "S")]
    pub fine_population: usize,
    #[serde(alias = "T1")]
    pub fine_generations: usize,
    #[serde(alias = "gamma")]
    pub crossover_rate: f64,
    #[serde(alias = "beta")]
    pub mutation_rate: f64,
    pub alpha: f64,
    #[serde(alias = "N_min")]
    pub n_min: usize,
    #[serde(alias = "N_max")]
    pub n_max: usize,
    pub epochs_individual: u32,
    pub epochs_supernet: u32,
    pub update_interval: usize,
    pub seed: u64,
    pub backend: Backend,
    pub dataset_id: String,
    pub workers: usize,
    pub worker_cmd: Option<String>,
    pub surrogate: SurrogateConfig,
    pub decode: DecodeConfig,
    pub variant: Variant,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let bounds = DepthBounds::default();
        SearchConfig {
            population_size: 100,
            rough_generations: 100,
            fine_population: 30,
            fine_generations: 50,
            crossover_rate: 0.8,
            mutation_rate: 0.2,
            alpha: 0.005,
            n_min: bounds.n_min,
            n_max: bounds.n_max,
            epochs_individual: 10,
            epochs_supernet: 100,
            update_interval: 1,
            seed: 0,
            backend: Backend::Surrogate,
            dataset_id: "fashion-mnist-1k".to_string(),
            workers: 1,
            worker_cmd: None,
            surrogate: SurrogateConfig::default(),
            decode: DecodeConfig::default(),
            variant: Variant::default(),
        }
    }
}

impl SearchConfig {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let cfg: SearchConfig = serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            EngineError::Config(m) => EngineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn bounds(&self) -> DepthBounds {
        DepthBounds::new(self.n_min, self.n_max)
    }

    /// Digest of the canonical JSON form; checkpoints refuse to resume under
    /// a different one.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        for (name, v) in [
            ("population_size", self.population_size),
            ("fine_population", self.fine_population),
            ("update_interval", self.update_interval),
            ("workers", self.workers),
            ("n_min", self.n_min),
        ] {
            if v < 1 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.n_min > self.n_max {
            return bad(format!("n_min {} exceeds n_max {}", self.n_min, self.n_max));
        }
        if self.n_max > 255 {
            return bad("n_max must be at most 255".into());
        }
        if self.epochs_individual < 1 || self.epochs_supernet < 1 {
            return bad("epoch counts must be at least 1".into());
        }
        for (name, r) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        self.surrogate.check().map_err(EngineError::Config)?;
        if self.backend == Backend::External && self.worker_cmd.as_deref().is_none_or(|c| c.trim().is_empty()) {
            return bad("the external backend needs worker_cmd".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    NoFineStage,
    NoWeightInheritance,
    SinglePointCrossover,
    DropCellMutation,
    DropConnectMutation,
    DropNodeMutation,
    DropEdgeMutation,
    NoPruning,
}

impl AblationMode {
    pub const ALL: [AblationMode; 8] = [
        AblationMode::NoFineStage,
        AblationMode::NoWeightInheritance,
        AblationMode::SinglePointCrossover,
        AblationMode::DropCellMutation,
        AblationMode::DropConnectMutation,
        AblationMode::DropNodeMutation,
        AblationMode::DropEdgeMutation,
        AblationMode::NoPruning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::NoFineStage => "no-fine-stage",
            AblationMode::NoWeightInheritance => "no-weight-inheritance",
            AblationMode::SinglePointCrossover => "single-point-crossover",
            AblationMode::DropCellMutation => "drop-cell-mutation",
            AblationMode::DropConnectMutation => "drop-connect-mutation",
            AblationMode::DropNodeMutation => "drop-node-mutation",
            AblationMode::DropEdgeMutation => "drop-edge-mutation",
            AblationMode::NoPruning => "no-pruning",
        }
    }

    /// `base` with this component switched off.
    pub fn apply(self, base: Variant) -> Variant {
        let mut v = base;
        match self {
            AblationMode::NoFineStage => v.fine_stage = false,
            AblationMode::NoWeightInheritance => v.weight_inheritance = false,
            AblationMode::SinglePointCrossover => v.crossover = CrossoverMode::SinglePoint,
            AblationMode::DropCellMutation => v.cell_mutation = false,
            AblationMode::DropConnectMutation => v.connect_mutation = false,
            AblationMode::DropNodeMutation => v.fine_mutation = FineMutationMode::EdgeOnly,
            AblationMode::DropEdgeMutation => v.fine_mutation = FineMutationMode::NodeOnly,
            AblationMode::NoPruning => v.pruning = false,
        }
        v
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EngineError::UnknownAblation(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_names_and_defaults() {
        let cfg = SearchConfig::from_json(r#"{"P": 20, "T0": 10, "S": 5, "T1": 10, "seed": 42}"#).unwrap();
        assert_eq!((cfg.population_size, cfg.rough_generations), (20, 10));
        assert_eq!((cfg.fine_population, cfg.fine_generations), (5, 10));
        assert_eq!(cfg.crossover_rate, 0.8);
        assert_eq!(cfg.alpha, 0.005);
        assert_eq!(cfg.epochs_individual, 10);
        assert_eq!(cfg.epochs_supernet, 100);
        assert_eq!(cfg.update_interval, 1);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(SearchConfig::from_json(r#"{"population_size": 0}"#).is_err());
        assert!(SearchConfig::from_json(r#"{"mutation_rate": 1.5}"#).is_err());
        assert!(SearchConfig::from_json(r#"{"n_min": 9, "n_max": 4}"#).is_err());
        assert!(SearchConfig::from_json(r#"{"backend": "external"}"#).is_err());
        assert!(SearchConfig::from_json(r#"{"popsize": 3}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = SearchConfig::default();
        let b = SearchConfig { seed: 1, ..SearchConfig::default() };
        assert_eq!(a.hash(), SearchConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn ablation_names() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
            assert_ne!(m.apply(Variant::default()), Variant::default());
        }
        assert!(matches!("no-mutation".parse::<AblationMode>(), Err(EngineError::UnknownAblation(_))));
    }
}
