//! The two-stage search loop: SuperNet seeding, rough search over cell
//! chains, hand-off of the best `S`, and fine search inside the cells.
//!
//! [`Engine`] advances one step at a time (initialization, one generation,
//! or the hand-off) so a run can be checkpointed between any two steps and
//! resumed to the same result.

mod ablation;
mod checkpoint;
mod config;
mod history;

pub use ablation::{ablate, AblationReport, EvaluatorFactory, VariantSummary};
pub use checkpoint::{CheckpointState, CHECKPOINT_FORMAT};
pub use config::{AblationMode, Backend, SearchConfig, Variant};
pub use history::{history_csv, parse_history_csv, HistoryRow, HISTORY_HEADER};

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{
    evaluate_checked, EvalError, EvalRequest, Evaluator, ExternalEvaluator, RequestKind, SurrogateEvaluator,
};
use crate::evolution::{
    cell_mutation, connect_mutation, crossover, fine_mutation, init_population, prune, rank_order,
    tournament_select, EvalMeta, EvolutionError, Individual, SearchRng,
};
use crate::genome::{
    decode_to_network, export_dot, DecodeError, Genome, Stage1Genome, Stage2Genome, Violations,
};
use crate::search_space::CellLibrary;
use crate::selection::{fine_select_best, select_survivors, FineChoice, SelectionError};
use crate::weight_store::{WeightAssignment, WeightStore, WeightStoreError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown ablation mode {0:?}")]
    UnknownAblation(String),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("genome {digest:016x} is invalid at evaluation time: {violations}")]
    InvalidGenome { digest: u64, violations: Violations },
    #[error("evaluation failed: {source}{}", checkpoint_note(.checkpoint))]
    Eval {
        #[source]
        source: EvalError,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    WeightStore(WeightStoreError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint {path} was written under config {found}, current config is {expected}")]
    ConfigMismatch { path: PathBuf, expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

fn checkpoint_note(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!(" (last checkpoint: {})", p.display()),
        None => " (no checkpoint written)".to_string(),
    }
}

impl From<EvalError> for EngineError {
    fn from(source: EvalError) -> Self {
        EngineError::Eval { source, checkpoint: None }
    }
}

impl From<WeightStoreError> for EngineError {
    fn from(e: WeightStoreError) -> Self {
        match e {
            WeightStoreError::Eval(source) => EngineError::Eval { source, checkpoint: None },
            other => EngineError::WeightStore(other),
        }
    }
}

impl EngineError {
    fn with_checkpoint(self, path: Option<&Path>) -> Self {
        match self {
            EngineError::Eval { source, .. } => EngineError::Eval { source, checkpoint: path.map(Path::to_path_buf) },
            other => other,
        }
    }
}

/// Where the engine is in the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Nothing done yet.
    Init,
    /// Rough population evaluated; `generation` rough generations done.
    Rough,
    /// Fine slots evaluated; `generation` fine generations done.
    Fine,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: Individual,
    pub history: Vec<HistoryRow>,
    pub evaluations: u64,
    pub wall_time: Duration,
}

/// Stateless mixing of a run seed and a request id into a per-request seed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Builds the evaluator a config asks for. `worker_config` is handed to
/// external workers as their argument.
pub fn build_evaluator(
    cfg: &SearchConfig,
    lib: &CellLibrary,
    worker_config: Option<PathBuf>,
) -> Result<Box<dyn Evaluator>, EngineError> {
    match cfg.backend {
        Backend::Surrogate => {
            Ok(Box::new(SurrogateEvaluator::new(lib.clone(), cfg.surrogate, cfg.bounds(), cfg.decode)))
        }
        Backend::External => {
            let cmd = cfg.worker_cmd.as_deref().ok_or_else(|| EngineError::Config("worker_cmd is not set".into()))?;
            Ok(Box::new(ExternalEvaluator::spawn(cmd, worker_config, cfg.workers)?))
        }
    }
}

pub struct Engine {
    cfg: SearchConfig,
    lib: CellLibrary,
    rng: SearchRng,
    store: WeightStore,
    population: Vec<Individual>,
    phase: Phase,
    generation: usize,
    next_id: u64,
    history: Vec<HistoryRow>,
    evaluations: u64,
    elapsed: Duration,
}

impl Engine {
    pub fn new(cfg: SearchConfig, lib: CellLibrary) -> Result<Self, EngineError> {
        cfg.validate()?;
        let rng = SearchRng::seed_from_u64(cfg.seed);
        Ok(Engine {
            cfg,
            lib,
            rng,
            store: WeightStore::new(),
            population: Vec::new(),
            phase: Phase::Init,
            generation: 0,
            next_id: 1,
            history: Vec::new(),
            evaluations: 0,
            elapsed: Duration::ZERO,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn library(&self) -> &CellLibrary {
        &self.lib
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Generations completed in the current phase.
    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn population(&self) -> &[Individual] {
        &self.population
    }

    pub fn store(&self) -> &WeightStore {
        &self.store
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Best individual of the current population.
    pub fn best(&self) -> Option<&Individual> {
        self.population.iter().filter(|i| i.is_evaluated()).min_by(|a, b| rank_order(a, b))
    }

    /// Advances by one step and returns the new phase.
    pub fn step(&mut self, ev: &mut dyn Evaluator) -> Result<Phase, EngineError> {
        let started = Instant::now();
        match self.phase {
            Phase::Init => self.initialize(ev)?,
            Phase::Rough if self.generation < self.cfg.rough_generations => self.rough_generation(ev)?,
            Phase::Rough => self.handoff(ev)?,
            Phase::Fine if self.cfg.variant.fine_stage && self.generation < self.cfg.fine_generations => {
                self.fine_generation(ev)?
            }
            Phase::Fine => self.phase = Phase::Done,
            Phase::Done => {}
        }
        self.elapsed += started.elapsed();
        Ok(self.phase)
    }

    /// Steps until done, checkpointing after every step when `checkpoint`
    /// is set. Evaluation errors carry the last checkpoint written.
    pub fn run(
        &mut self,
        ev: &mut dyn Evaluator,
        checkpoint: Option<&Path>,
    ) -> Result<SearchResult, EngineError> {
        self.run_steps(ev, checkpoint, usize::MAX)?;
        self.result()
    }

    /// Takes at most `max_steps` steps. Returns whether the search finished.
    pub fn run_steps(
        &mut self,
        ev: &mut dyn Evaluator,
        checkpoint: Option<&Path>,
        max_steps: usize,
    ) -> Result<bool, EngineError> {
        let mut last: Option<PathBuf> = None;
        if let Some(dir) = checkpoint {
            if dir.join(checkpoint::STATE_FILE).exists() {
                last = Some(dir.to_path_buf());
            }
        }
        for _ in 0..max_steps {
            if self.is_done() {
                break;
            }
            self.step(ev).map_err(|e| e.with_checkpoint(last.as_deref()))?;
            if let Some(dir) = checkpoint {
                self.save_checkpoint(dir)?;
                last = Some(dir.to_path_buf());
            }
        }
        Ok(self.is_done())
    }

    pub fn result(&self) -> Result<SearchResult, EngineError> {
        let best = self
            .best()
            .cloned()
            .ok_or_else(|| EngineError::Config("search has no evaluated individual yet".into()))?;
        Ok(SearchResult { best, history: self.history.clone(), evaluations: self.evaluations, wall_time: self.elapsed })
    }

    fn initialize(&mut self, ev: &mut dyn Evaluator) -> Result<(), EngineError> {
        self.store = WeightStore::init_from_supernet(
            &self.lib,
            ev,
            self.cfg.epochs_supernet,
            &self.cfg.dataset_id,
            splitmix64(self.cfg.seed),
        )?;
        let mut members = init_population(self.cfg.population_size, self.cfg.bounds(), &mut self.rng)?.members;
        self.evaluate_pending(ev, &mut members)?;
        self.population = members;
        self.phase = Phase::Rough;
        self.generation = 0;
        Ok(())
    }

    fn stage1(&self, index: usize) -> &Stage1Genome {
        match &self.population[index].genome {
            Genome::Stage1(g) => g,
            Genome::Stage2(_) => unreachable!("rough population holds stage-1 genomes"),
        }
    }

    /// New individual for `genome`, reusing a parent's evaluation when the
    /// operator returned the parent unchanged.
    fn offspring(&self, genome: Stage1Genome, parents: &[usize]) -> Individual {
        for &p in parents {
            if *self.stage1(p) == genome {
                return self.population[p].clone();
            }
        }
        Individual::new(Genome::Stage1(genome))
    }

    fn rough_generation(&mut self, ev: &mut dyn Evaluator) -> Result<(), EngineError> {
        let p = self.cfg.population_size;
        let v = self.cfg.variant;
        let mut children: Vec<Individual> = Vec::with_capacity(p + 2);
        while children.len() < p {
            let a = tournament_select(&self.population, &mut self.rng)?;
            let b = tournament_select(&self.population, &mut self.rng)?;
            let (pa, pb) = (self.stage1(a).clone(), self.stage1(b).clone());
            let (c1, c2) = crossover(&pa, &pb, self.cfg.crossover_rate, v.crossover, &mut self.rng);
            children.push(self.offspring(c1, &[a, b]));
            children.push(self.offspring(c2, &[a, b]));

            let m = tournament_select(&self.population, &mut self.rng)?;
            let coin = self.rng.gen_bool(0.5);
            let parent = self.stage1(m).clone();
            let mutant = match (v.cell_mutation, v.connect_mutation) {
                (true, true) if !coin => cell_mutation(&parent, self.cfg.mutation_rate, &mut self.rng),
                (true, true) => connect_mutation(&parent, self.cfg.mutation_rate, &mut self.rng),
                (true, false) => cell_mutation(&parent, self.cfg.mutation_rate, &mut self.rng),
                (false, true) => connect_mutation(&parent, self.cfg.mutation_rate, &mut self.rng),
                (false, false) => parent,
            };
            children.push(self.offspring(mutant, &[m]));
        }
        children.truncate(p);
        self.evaluate_pending(ev, &mut children)?;

        let parents = std::mem::take(&mut self.population);
        self.population = select_survivors(parents, children, p, self.cfg.alpha)?;
        self.generation += 1;
        if self.generation.is_multiple_of(self.cfg.update_interval) {
            self.store.update_from_population(&self.population);
        }
        self.history.push(HistoryRow::summarize(self.history.len() + 1, &self.population));
        Ok(())
    }

    /// Expands the best `S` rough survivors and re-evaluates them.
    fn handoff(&mut self, ev: &mut dyn Evaluator) -> Result<(), EngineError> {
        let mut ranked = self.population.clone();
        ranked.sort_by(rank_order);
        ranked.truncate(self.cfg.fine_population);
        let mut slots = Vec::with_capacity(ranked.len());
        for ind in &ranked {
            let g = ind
                .genome
                .to_stage2(&self.lib, self.cfg.bounds())
                .map_err(|violations| EngineError::InvalidGenome { digest: ind.digest(), violations })?;
            slots.push(Individual::new(Genome::Stage2(g)));
        }
        self.evaluate_pending(ev, &mut slots)?;
        self.population = slots;
        self.phase = Phase::Fine;
        self.generation = 0;
        Ok(())
    }

    fn fine_generation(&mut self, ev: &mut dyn Evaluator) -> Result<(), EngineError> {
        let v = self.cfg.variant;
        let mut candidates: Vec<Individual> = Vec::new();
        // per slot: index of the mutant and of the pruned variant in `candidates`
        let mut layout: Vec<(usize, Option<usize>)> = Vec::with_capacity(self.population.len());
        for slot in &self.population {
            let g: &Stage2Genome = match &slot.genome {
                Genome::Stage2(g) => g,
                Genome::Stage1(_) => unreachable!("fine slots hold stage-2 genomes"),
            };
            let mutant = fine_mutation(g, v.fine_mutation, &mut self.rng);
            let mi = candidates.len();
            candidates.push(if mutant == *g { slot.clone() } else { Individual::new(Genome::Stage2(mutant)) });
            let pi = if v.pruning {
                prune(g, &mut self.rng).genome().map(|pg| {
                    candidates.push(Individual::new(Genome::Stage2(pg.clone())));
                    candidates.len() - 1
                })
            } else {
                None
            };
            layout.push((mi, pi));
        }
        self.evaluate_pending(ev, &mut candidates)?;

        let mut next = Vec::with_capacity(self.population.len());
        for (slot, (mi, pi)) in self.population.iter().zip(layout) {
            let pruned = pi.map(|i| &candidates[i]);
            let winner = match fine_select_best(slot, &candidates[mi], pruned, &self.lib)? {
                FineChoice::Old => slot.clone(),
                FineChoice::Mutated => candidates[mi].clone(),
                FineChoice::Pruned => candidates[pi.expect("pruned variant exists")].clone(),
            };
            next.push(winner);
        }
        self.population = next;
        self.generation += 1;
        self.history.push(HistoryRow::summarize(self.history.len() + 1, &self.population));
        Ok(())
    }

    /// Evaluates every member without a fitness in one batch.
    fn evaluate_pending(&mut self, ev: &mut dyn Evaluator, members: &mut [Individual]) -> Result<(), EngineError> {
        let pending: Vec<usize> = (0..members.len()).filter(|&i| !members[i].is_evaluated()).collect();
        if pending.is_empty() {
            return Ok(());
        }
        let mut requests = Vec::with_capacity(pending.len());
        for &i in &pending {
            let ind = &members[i];
            let genome = ind
                .genome
                .to_stage2(&self.lib, self.cfg.bounds())
                .map_err(|violations| EngineError::InvalidGenome { digest: ind.digest(), violations })?;
            let assignment = if self.cfg.variant.weight_inheritance {
                self.store.inherit_weights(&genome)
            } else {
                WeightAssignment::all_fresh(&genome)
            };
            let id = self.next_id;
            self.next_id += 1;
            requests.push(EvalRequest {
                id,
                kind: RequestKind::Evaluate,
                genome,
                assignment: assignment.positions,
                epochs: self.cfg.epochs_individual,
                dataset: self.cfg.dataset_id.clone(),
                seed: splitmix64(self.cfg.seed ^ id),
            });
        }
        let responses = evaluate_checked(ev, &requests)?;
        for (&i, resp) in pending.iter().zip(responses) {
            let ind = &mut members[i];
            ind.fitness = resp.fitness;
            ind.eval_meta =
                EvalMeta { epochs_trained: self.cfg.epochs_individual, param_count_estimate: resp.param_count.unwrap_or(0) };
            ind.blobs = resp.blob_updates;
        }
        self.evaluations += pending.len() as u64;
        Ok(())
    }
}

/// Writes `best.genome.json`, `best.dot`, `history.csv` and `config.json`
/// into `out`.
pub fn write_artifacts(
    out: &Path,
    result: &SearchResult,
    cfg: &SearchConfig,
    lib: &CellLibrary,
) -> Result<(), EngineError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EngineError::Io { path, source }
    };
    std::fs::create_dir_all(out).map_err(io(out))?;
    let best = result
        .best
        .genome
        .to_stage2(lib, cfg.bounds())
        .map_err(|violations| EngineError::InvalidGenome { digest: result.best.digest(), violations })?;
    let dot = export_dot(&decode_to_network(&best, lib, &cfg.decode)?);
    let files = [
        ("best.genome.json", result.best.genome.to_json()),
        ("best.dot", dot),
        ("history.csv", history_csv(&result.history)),
        ("config.json", cfg.to_json()),
    ];
    for (name, text) in files {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(())
}
