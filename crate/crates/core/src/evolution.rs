//! Population initialization and the genetic operators of both search stages.
//!
//! Stage 1: crossover, cell mutation, connect mutation. Stage 2: node/edge
//! mutation and pruning. Every operator draws only from the [`SearchRng`] it
//! is handed, so identical inputs and RNG state give identical outputs.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{CellGene, DepthBounds, Genome, Stage1Genome, Stage2Genome, StructuralKey};
use crate::search_space::{CellGraph, CellType, NodeGene, FIRST_INTERMEDIATE, NUM_OPERATIONS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvolutionError {
    #[error("invalid depth bounds {n_min}..={n_max}")]
    InvalidBounds { n_min: usize, n_max: usize },
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error("individual {0} has not been evaluated")]
    Unevaluated(usize),
}

/// Seedable, counter-based random stream whose position can be saved and
/// restored exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchRng(ChaCha8Rng);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl SearchRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        SearchRng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: hex::encode(self.0.get_seed()),
            stream: self.0.get_stream(),
            word_pos: self.0.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        let bytes = hex::decode(&state.seed).ok()?;
        let seed: [u8; 32] = bytes.try_into().ok()?;
        let word_pos: u128 = state.word_pos.parse().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(word_pos);
        Some(SearchRng(rng))
    }
}

impl RngCore for SearchRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub epochs_trained: u32,
    pub param_count_estimate: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    pub fitness: Option<f64>,
    #[serde(default)]
    pub eval_meta: EvalMeta,
    /// Per-cell weights returned by the last evaluation.
    #[serde(default, with = "crate::evaluation::blob_list")]
    pub blobs: Vec<(StructuralKey, Vec<u8>)>,
}

impl Individual {
    pub fn new(genome: Genome) -> Self {
        Individual { genome, fitness: None, eval_meta: EvalMeta::default(), blobs: Vec::new() }
    }

    pub fn is_evaluated(&self) -> bool {
        self.fitness.is_some()
    }

    pub fn depth(&self) -> usize {
        self.genome.depth()
    }

    pub fn digest(&self) -> u64 {
        self.genome.digest()
    }

    /// Fitness, or `-inf` when unevaluated.
    pub fn score(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Orders individuals best-first: fitness descending, then genome digest ascending.
pub fn rank_order(a: &Individual, b: &Individual) -> std::cmp::Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.digest().cmp(&b.digest()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<Individual>,
    pub generation: u64,
}

/// Draws one stage-1 chain the way population initialization does.
///
/// Cell codes come from all eight templates while fewer than `n / 2` Reduction
/// cells have been placed, and from the four Normal templates afterwards.
pub fn random_stage1(bounds: DepthBounds, rng: &mut SearchRng) -> Stage1Genome {
    let n = rng.gen_range(bounds.n_min..=bounds.n_max);
    let mut reductions = 0usize;
    let mut genes = Vec::with_capacity(n);
    for j in 1..=n {
        let skip = if j == 1 { 0 } else { rng.gen_range(0..=j - 2) };
        let code = if 2 * reductions < n {
            let c = rng.gen_range(1..=8u8);
            if CellType::of_code(c) == Some(CellType::Reduction) {
                reductions += 1;
            }
            c
        } else {
            rng.gen_range(1..=4u8)
        };
        genes.push(CellGene::new(j - 1, skip, code));
    }
    Stage1Genome::new(genes)
}

pub fn init_population(
    size: usize,
    bounds: DepthBounds,
    rng: &mut SearchRng,
) -> Result<Population, EvolutionError> {
    if bounds.n_min < 1 || bounds.n_min > bounds.n_max {
        return Err(EvolutionError::InvalidBounds { n_min: bounds.n_min, n_max: bounds.n_max });
    }
    if size == 0 {
        return Err(EvolutionError::EmptyPopulation);
    }
    let members = (0..size)
        .map(|_| Individual::new(Genome::Stage1(random_stage1(bounds, rng))))
        .collect();
    Ok(Population { members, generation: 0 })
}

/// Size-2 tournament with replacement; returns the winner's index.
pub fn tournament_select(pop: &[Individual], rng: &mut SearchRng) -> Result<usize, EvolutionError> {
    if pop.is_empty() {
        return Err(EvolutionError::EmptyPopulation);
    }
    if let Some(i) = pop.iter().position(|p| !p.is_evaluated()) {
        return Err(EvolutionError::Unevaluated(i));
    }
    let a = rng.gen_range(0..pop.len());
    let b = rng.gen_range(0..pop.len());
    Ok(match rank_order(&pop[a], &pop[b]) {
        std::cmp::Ordering::Greater => b,
        std::cmp::Ordering::Less => a,
        std::cmp::Ordering::Equal => a.min(b),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossoverMode {
    /// Every matched pair swaps independently with probability 1/2.
    #[default]
    MultiPoint,
    /// All matched pairs after one random cut point swap.
    SinglePoint,
}

/// Positions `(in shorter parent, in longer parent)` that may exchange cells.
///
/// The shorter parent (the first on ties) is walked in order; each cell is
/// paired with the next unused cell of the same type in the other parent, or
/// skipped when none is left.
pub fn crossover_pairs(bench: &Stage1Genome, other: &Stage1Genome) -> Vec<(usize, usize)> {
    let mut cursor = [0usize; 2];
    let mut pairs = Vec::new();
    for (i, gene) in bench.genes.iter().enumerate() {
        let t = gene.cell_type();
        let slot = usize::from(t == Some(CellType::Reduction));
        let found = (cursor[slot]..other.genes.len()).find(|&j| other.genes[j].cell_type() == t);
        match found {
            Some(j) => {
                pairs.push((i, j));
                cursor[slot] = j + 1;
            }
            None => cursor[slot] = other.genes.len(),
        }
    }
    pairs
}

/// Type-preserving crossover that swaps cell codes at matched positions and
/// leaves every connection untouched.
pub fn crossover(
    p1: &Stage1Genome,
    p2: &Stage1Genome,
    rate: f64,
    mode: CrossoverMode,
    rng: &mut SearchRng,
) -> (Stage1Genome, Stage1Genome) {
    let mut q1 = p1.clone();
    let mut q2 = p2.clone();
    if !rng.gen_bool(rate) {
        return (q1, q2);
    }
    let p1_is_bench = p1.depth() <= p2.depth();
    let pairs = if p1_is_bench { crossover_pairs(p1, p2) } else { crossover_pairs(p2, p1) };
    if pairs.is_empty() {
        return (q1, q2);
    }
    let swap: Vec<bool> = match mode {
        CrossoverMode::MultiPoint => pairs.iter().map(|_| rng.gen_bool(0.5)).collect(),
        CrossoverMode::SinglePoint => {
            let cut = rng.gen_range(0..pairs.len());
            (0..pairs.len()).map(|k| k >= cut).collect()
        }
    };
    for (&(b, o), _) in pairs.iter().zip(&swap).filter(|(_, &s)| s) {
        let (i1, i2) = if p1_is_bench { (b, o) } else { (o, b) };
        std::mem::swap(&mut q1.genes[i1].cell_code, &mut q2.genes[i2].cell_code);
    }
    (q1, q2)
}

/// Number of mutation points in a chain of `n` cells: `1 + Binomial(n - 1, 1/n)`.
pub fn mutation_points(n: usize, rng: &mut SearchRng) -> usize {
    if n <= 1 {
        return n;
    }
    let p = 1.0 / n as f64;
    1 + (0..n - 1).filter(|_| rng.gen_bool(p)).count()
}

/// Uniform draw from `0..=max` excluding `current`.
fn redraw_excluding(max: usize, current: usize, rng: &mut SearchRng) -> usize {
    debug_assert!(max >= 1 && current <= max);
    let r = rng.gen_range(0..max);
    if r >= current {
        r + 1
    } else {
        r
    }
}

/// With probability `rate`, re-draws the code of a random subset of cells
/// among the other templates of the same type.
pub fn cell_mutation(p: &Stage1Genome, rate: f64, rng: &mut SearchRng) -> Stage1Genome {
    let mut q = p.clone();
    if q.genes.is_empty() || !rng.gen_bool(rate) {
        return q;
    }
    let n = q.depth();
    let m = mutation_points(n, rng);
    let mut positions = index::sample(rng, n, m).into_vec();
    positions.sort_unstable();
    for pos in positions {
        let gene = &mut q.genes[pos];
        let Some(t) = gene.cell_type() else { continue };
        let first = *t.codes().start();
        let offset = redraw_excluding(3, (gene.cell_code - first) as usize, rng);
        gene.cell_code = first + offset as u8;
    }
    q
}

/// With probability `rate`, re-draws the skip input of random cells at
/// positions 3 and later (earlier cells have no alternative).
pub fn connect_mutation(p: &Stage1Genome, rate: f64, rng: &mut SearchRng) -> Stage1Genome {
    let mut q = p.clone();
    if !rng.gen_bool(rate) {
        return q;
    }
    let n = q.depth();
    if n < 3 {
        return q;
    }
    let eligible = n - 2;
    let m = mutation_points(n, rng).min(eligible);
    let mut picks = index::sample(rng, eligible, m).into_vec();
    picks.sort_unstable();
    for k in picks {
        let pos = k + 2;
        let j = pos + 1;
        let gene = &mut q.genes[pos];
        gene.skip = redraw_excluding(j - 2, gene.skip, rng);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineMutationMode {
    /// Fair coin per cell between edge and node mutation.
    #[default]
    Both,
    EdgeOnly,
    NodeOnly,
}

fn mutate_edge(graph: &mut CellGraph, rng: &mut SearchRng) {
    let live = graph.live_nodes();
    if live.is_empty() {
        return;
    }
    let pick = rng.gen_range(0..2 * live.len());
    let node = &mut graph.nodes[live[pick / 2] - FIRST_INTERMEDIATE];
    let op = if pick % 2 == 0 { &mut node.op1 } else { &mut node.op2 };
    let current = (*op - 1) as usize;
    *op = redraw_excluding(NUM_OPERATIONS as usize - 1, current, rng) as u8 + 1;
}

fn mutate_node(graph: &mut CellGraph, rng: &mut SearchRng) {
    let live = graph.live_nodes();
    if live.is_empty() {
        return;
    }
    let index = live[rng.gen_range(0..live.len())];
    let first_input = rng.gen_bool(0.5);
    let node = graph.nodes[index - FIRST_INTERMEDIATE];
    let current = if first_input { node.in1 } else { node.in2 } as usize;
    let options: Vec<usize> = [0, 1]
        .into_iter()
        .chain(live.iter().copied().filter(|&i| i < index))
        .filter(|&i| i != current)
        .collect();
    if options.is_empty() {
        return;
    }
    let choice = options[rng.gen_range(0..options.len())] as u8;
    let node = &mut graph.nodes[index - FIRST_INTERMEDIATE];
    if first_input {
        node.in1 = choice;
    } else {
        node.in2 = choice;
    }
}

/// Mutates every cell once: either one edge operation is replaced by a
/// different operation, or one input of one node is re-pointed to another
/// earlier node.
pub fn fine_mutation(p: &Stage2Genome, mode: FineMutationMode, rng: &mut SearchRng) -> Stage2Genome {
    let mut q = p.clone();
    for gene in &mut q.genes {
        let edge = match mode {
            FineMutationMode::Both => rng.gen_bool(0.5),
            FineMutationMode::EdgeOnly => true,
            FineMutationMode::NodeOnly => false,
        };
        if edge {
            mutate_edge(&mut gene.graph, rng);
        } else {
            mutate_node(&mut gene.graph, rng);
        }
    }
    q
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PruneOutcome {
    Pruned { genome: Stage2Genome, cell: usize, node: usize },
    /// Every cell is down to one live node.
    NoOp,
}

impl PruneOutcome {
    pub fn genome(&self) -> Option<&Stage2Genome> {
        match self {
            PruneOutcome::Pruned { genome, .. } => Some(genome),
            PruneOutcome::NoOp => None,
        }
    }
}

/// Deletes one live node of one cell (both chosen uniformly among cells with
/// at least two live nodes). Consumers of the deleted node are rewired to its
/// first input.
pub fn prune(p: &Stage2Genome, rng: &mut SearchRng) -> PruneOutcome {
    let candidates: Vec<usize> = p
        .genes
        .iter()
        .enumerate()
        .filter(|(_, g)| g.graph.live_count() >= 2)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return PruneOutcome::NoOp;
    }
    let cell = candidates[rng.gen_range(0..candidates.len())];
    let mut genome = p.clone();
    let graph = &mut genome.genes[cell].graph;
    let live = graph.live_nodes();
    let node = live[rng.gen_range(0..live.len())];
    let pred = graph.nodes[node - FIRST_INTERMEDIATE].in1;
    for later in graph.nodes.iter_mut().skip(node + 1 - FIRST_INTERMEDIATE) {
        if later.is_pruned() {
            continue;
        }
        if later.in1 as usize == node {
            later.in1 = pred;
        }
        if later.in2 as usize == node {
            later.in2 = pred;
        }
    }
    graph.nodes[node - FIRST_INTERMEDIATE] = NodeGene::PRUNED;
    PruneOutcome::Pruned { genome, cell, node }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{expand_to_stage2, validate_stage1, validate_stage2, Stage2Gene};
    use crate::search_space::CellLibrary;

    fn rng(seed: u64) -> SearchRng {
        SearchRng::seed_from_u64(seed)
    }

    fn evaluated(codes: &[(usize, u8)], fitness: f64) -> Individual {
        let mut ind = Individual::new(Genome::Stage1(Stage1Genome::from_codes(codes)));
        ind.fitness = Some(fitness);
        ind
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = rng(9);
        for _ in 0..37 {
            a.next_u32();
        }
        let mut b = SearchRng::from_state(&a.state()).unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn init_population_sizes_and_validity() {
        let lib = CellLibrary::default();
        let bounds = DepthBounds::new(3, 10);
        let pop = init_population(100, bounds, &mut rng(1)).unwrap();
        assert_eq!(pop.members.len(), 100);
        for m in &pop.members {
            let Genome::Stage1(g) = &m.genome else { panic!() };
            validate_stage1(g, &lib, bounds).unwrap();
            assert!(!m.is_evaluated());
        }
    }

    #[test]
    fn init_population_single_cell() {
        let pop = init_population(20, DepthBounds::new(1, 1), &mut rng(2)).unwrap();
        for m in &pop.members {
            let Genome::Stage1(g) = &m.genome else { panic!() };
            assert_eq!(g.genes.len(), 1);
            assert_eq!((g.genes[0].prev, g.genes[0].skip), (0, 0));
        }
    }

    #[test]
    fn init_population_rejects_bad_bounds() {
        assert!(init_population(5, DepthBounds::new(0, 3), &mut rng(0)).is_err());
        assert!(init_population(5, DepthBounds::new(4, 3), &mut rng(0)).is_err());
        assert_eq!(
            init_population(0, DepthBounds::new(1, 3), &mut rng(0)).unwrap_err(),
            EvolutionError::EmptyPopulation
        );
    }

    #[test]
    fn tournament_prefers_fitter() {
        let pop = vec![evaluated(&[(0, 1)], 0.9), evaluated(&[(0, 2)], 0.1)];
        let mut r = rng(3);
        for _ in 0..200 {
            let mut probe = r.clone();
            let a = probe.gen_range(0..2usize);
            let b = probe.gen_range(0..2usize);
            let w = tournament_select(&pop, &mut r).unwrap();
            if a != b {
                assert_eq!(w, 0);
            }
        }
    }

    #[test]
    fn tournament_tie_breaks_by_digest() {
        let pop = vec![evaluated(&[(0, 1)], 0.5), evaluated(&[(0, 2)], 0.5)];
        let lower = if pop[0].digest() < pop[1].digest() { 0 } else { 1 };
        let mut r = rng(4);
        for _ in 0..200 {
            let mut probe = r.clone();
            let a = probe.gen_range(0..2usize);
            let b = probe.gen_range(0..2usize);
            let w = tournament_select(&pop, &mut r).unwrap();
            if a != b {
                assert_eq!(w, lower);
            }
        }
    }

    #[test]
    fn tournament_requires_evaluation() {
        let pop = vec![evaluated(&[(0, 1)], 0.5), Individual::new(Genome::Stage1(Stage1Genome::from_codes(&[(0, 1)])))];
        assert_eq!(tournament_select(&pop, &mut rng(0)), Err(EvolutionError::Unevaluated(1)));
    }

    #[test]
    fn crossover_pairs_match_types_in_order() {
        // p1 types [N, R, N], p2 types [N, N, N, R]
        let p1 = Stage1Genome::from_codes(&[(0, 1), (0, 5), (1, 2)]);
        let p2 = Stage1Genome::from_codes(&[(0, 3), (0, 4), (1, 2), (0, 8)]);
        assert_eq!(crossover_pairs(&p1, &p2), vec![(0, 0), (1, 3), (2, 1)]);
        // a Reduction cell with no partner left is skipped
        let p3 = Stage1Genome::from_codes(&[(0, 5), (0, 6), (1, 1)]);
        let p4 = Stage1Genome::from_codes(&[(0, 7), (0, 1), (1, 2), (0, 3)]);
        assert_eq!(crossover_pairs(&p3, &p4), vec![(0, 0), (2, 1)]);
    }

    #[test]
    fn crossover_rate_zero_and_identical_parents() {
        let p1 = Stage1Genome::from_codes(&[(0, 1), (0, 5), (1, 2)]);
        let p2 = Stage1Genome::from_codes(&[(0, 3), (0, 4), (1, 2), (0, 8)]);
        let mut r = rng(5);
        for _ in 0..50 {
            assert_eq!(crossover(&p1, &p2, 0.0, CrossoverMode::MultiPoint, &mut r), (p1.clone(), p2.clone()));
            assert_eq!(crossover(&p1, &p1, 1.0, CrossoverMode::MultiPoint, &mut r), (p1.clone(), p1.clone()));
        }
    }

    #[test]
    fn crossover_keeps_connections_and_types() {
        let p1 = Stage1Genome::from_codes(&[(0, 1), (0, 5), (1, 2)]);
        let p2 = Stage1Genome::from_codes(&[(0, 3), (0, 4), (1, 2), (0, 8)]);
        let mut r = rng(6);
        let mut saw_change = false;
        for _ in 0..100 {
            let (q1, q2) = crossover(&p1, &p2, 1.0, CrossoverMode::MultiPoint, &mut r);
            assert_eq!(q1.type_vector(), p1.type_vector());
            assert_eq!(q2.type_vector(), p2.type_vector());
            for (a, b) in q1.genes.iter().zip(&p1.genes) {
                assert_eq!((a.prev, a.skip), (b.prev, b.skip));
            }
            saw_change |= q1 != p1;
        }
        assert!(saw_change);
    }

    #[test]
    fn single_point_crossover_swaps_a_suffix() {
        let p1 = Stage1Genome::from_codes(&[(0, 1), (0, 2), (1, 3)]);
        let p2 = Stage1Genome::from_codes(&[(0, 4), (0, 3), (1, 2)]);
        let mut r = rng(7);
        for _ in 0..50 {
            let (q1, _) = crossover(&p1, &p2, 1.0, CrossoverMode::SinglePoint, &mut r);
            let swapped: Vec<bool> = q1.genes.iter().zip(&p1.genes).map(|(a, b)| a != b).collect();
            let first = swapped.iter().position(|&s| s).expect("at least one pair swaps");
            assert!(swapped[first..].iter().all(|&s| s));
        }
    }

    #[test]
    fn cell_mutation_stays_within_type() {
        let p = Stage1Genome::from_codes(&[(0, 2), (0, 7)]);
        let mut r = rng(8);
        for _ in 0..200 {
            let q = cell_mutation(&p, 1.0, &mut r);
            assert_ne!(q, p);
            for (a, b) in q.genes.iter().zip(&p.genes) {
                if a.cell_code != b.cell_code {
                    match b.cell_code {
                        2 => assert!([1, 3, 4].contains(&a.cell_code)),
                        7 => assert!([5, 6, 8].contains(&a.cell_code)),
                        _ => unreachable!(),
                    }
                }
            }
            assert_eq!(cell_mutation(&p, 0.0, &mut r), p);
        }
    }

    #[test]
    fn connect_mutation_allowed_set() {
        // position 5 with skip 2 may move to 0, 1 or 3
        let p = Stage1Genome::from_codes(&[(0, 1), (0, 1), (1, 1), (0, 1), (2, 1)]);
        let mut seen = std::collections::BTreeSet::new();
        let mut r = rng(9);
        for _ in 0..500 {
            let q = connect_mutation(&p, 1.0, &mut r);
            assert_ne!(q, p);
            for (a, b) in q.genes.iter().zip(&p.genes).take(2) {
                assert_eq!(a, b);
            }
            if q.genes[4].skip != 2 {
                seen.insert(q.genes[4].skip);
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn connect_mutation_identity_cases() {
        let short = Stage1Genome::from_codes(&[(0, 1), (0, 2)]);
        let long = Stage1Genome::from_codes(&[(0, 1), (0, 2), (1, 3)]);
        let mut r = rng(10);
        for _ in 0..50 {
            assert_eq!(connect_mutation(&short, 1.0, &mut r), short);
            assert_eq!(connect_mutation(&long, 0.0, &mut r), long);
        }
    }

    fn single_node_genome(node: NodeGene) -> Stage2Genome {
        Stage2Genome {
            genes: vec![Stage2Gene { gene: CellGene::new(0, 0, 1), graph: CellGraph::new(vec![node]) }],
        }
    }

    #[test]
    fn node_mutation_on_minimal_cell() {
        let g = single_node_genome(NodeGene::new(0, 1, 3, 4));
        let mut r = rng(11);
        for _ in 0..100 {
            let q = fine_mutation(&g, FineMutationMode::NodeOnly, &mut r);
            let n = q.genes[0].graph.nodes[0];
            assert_eq!((n.op1, n.op2), (3, 4));
            assert!(n == NodeGene::new(1, 1, 3, 4) || n == NodeGene::new(0, 0, 3, 4));
        }
    }

    #[test]
    fn edge_mutation_changes_exactly_one_op() {
        let g = single_node_genome(NodeGene::new(0, 1, 6, 6));
        let mut r = rng(12);
        for _ in 0..200 {
            let q = fine_mutation(&g, FineMutationMode::EdgeOnly, &mut r);
            let n = q.genes[0].graph.nodes[0];
            let changed: Vec<u8> = [n.op1, n.op2].into_iter().filter(|&o| o != 6).collect();
            assert_eq!(changed.len(), 1);
            assert!((1..=13).contains(&changed[0]));
        }
    }

    #[test]
    fn prune_removes_one_node_and_rewires() {
        // chain 2 <- 3 <- 4 inside one cell
        let g = Stage2Genome {
            genes: vec![Stage2Gene {
                gene: CellGene::new(0, 0, 1),
                graph: CellGraph::new(vec![
                    NodeGene::new(0, 1, 2, 2),
                    NodeGene::new(2, 1, 3, 3),
                    NodeGene::new(3, 0, 4, 4),
                ]),
            }],
        };
        let mut r = rng(13);
        let mut seen_middle = false;
        for _ in 0..100 {
            let PruneOutcome::Pruned { genome, cell, node } = prune(&g, &mut r) else { panic!() };
            assert_eq!(cell, 0);
            let graph = &genome.genes[0].graph;
            assert_eq!(graph.live_count(), 2);
            assert!(graph.nodes[node - 2].is_pruned());
            if node == 3 {
                seen_middle = true;
                assert_eq!(graph.nodes[2], NodeGene::new(2, 0, 4, 4));
            }
            if node == 2 {
                assert_eq!(graph.nodes[1], NodeGene::new(0, 1, 3, 3));
            }
        }
        assert!(seen_middle);
    }

    #[test]
    fn prune_noop_when_all_cells_minimal() {
        let g = single_node_genome(NodeGene::new(0, 1, 2, 2));
        assert_eq!(prune(&g, &mut rng(14)), PruneOutcome::NoOp);
    }

    #[test]
    fn prune_five_to_four() {
        let lib = CellLibrary::default();
        let g = expand_to_stage2(&Stage1Genome::from_codes(&[(0, 2)]), &lib, DepthBounds::new(1, 2)).unwrap();
        assert_eq!(g.genes[0].graph.live_count(), 5);
        let out = prune(&g, &mut rng(15));
        let pruned = out.genome().unwrap();
        assert_eq!(pruned.genes[0].graph.live_count(), 4);
        validate_stage2(pruned, &lib, DepthBounds::new(1, 2)).unwrap();
    }

    #[test]
    fn operators_are_deterministic() {
        let lib = CellLibrary::default();
        let bounds = DepthBounds::new(3, 9);
        let g = random_stage1(bounds, &mut rng(16));
        let s2 = expand_to_stage2(&g, &lib, bounds).unwrap();
        let run = |seed| {
            let mut r = rng(seed);
            (
                cell_mutation(&g, 1.0, &mut r),
                connect_mutation(&g, 1.0, &mut r),
                fine_mutation(&s2, FineMutationMode::Both, &mut r),
                prune(&s2, &mut r),
            )
        };
        assert_eq!(run(17), run(17));
    }
}
