//! Survivor selection for both search stages.
//!
//! The rough stage groups candidates into fitness levels of width `alpha`
//! (anchored at each level's best member), admits whole levels best-first
//! and settles the overflowing level by depth density. The fine stage keeps
//! the best of an individual and its edited variants.

use std::cmp::Ordering;

use thiserror::Error;

use crate::evolution::{rank_order, Individual};
use crate::search_space::CellLibrary;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("candidate {0} has not been evaluated")]
    Unevaluated(usize),
    #[error("need {needed} survivors but only {available} candidates")]
    Insufficient { needed: usize, available: usize },
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
}

fn check_evaluated(inds: &[Individual]) -> Result<(), SelectionError> {
    match inds.iter().position(|i| !i.is_evaluated()) {
        Some(i) => Err(SelectionError::Unevaluated(i)),
        None => Ok(()),
    }
}

/// Indices grouped into levels, best level first. Members of a level are in
/// rank order.
pub fn level_partition(inds: &[Individual], alpha: f64) -> Result<Vec<Vec<usize>>, SelectionError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SelectionError::InvalidAlpha(alpha));
    }
    check_evaluated(inds)?;
    let mut order: Vec<usize> = (0..inds.len()).collect();
    order.sort_by(|&a, &b| rank_order(&inds[a], &inds[b]));

    let mut levels: Vec<Vec<usize>> = Vec::new();
    let mut top = f64::NAN;
    for i in order {
        let f = inds[i].score();
        match levels.last_mut() {
            Some(level) if top - f < alpha => level.push(i),
            _ => {
                top = f;
                levels.push(vec![i]);
            }
        }
    }
    Ok(levels)
}

/// Number of already selected individuals with the candidate's depth.
pub fn density_value(candidate: &Individual, selected: &[&Individual]) -> usize {
    let n = candidate.depth();
    selected.iter().filter(|s| s.depth() == n).count()
}

/// Picks exactly `p` survivors and returns their indices in admission order.
pub fn environmental_select(candidates: &[Individual], p: usize, alpha: f64) -> Result<Vec<usize>, SelectionError> {
    if candidates.len() < p {
        return Err(SelectionError::Insufficient { needed: p, available: candidates.len() });
    }
    let levels = level_partition(candidates, alpha)?;
    let mut chosen: Vec<usize> = Vec::with_capacity(p);
    for level in levels {
        if chosen.len() == p {
            break;
        }
        if chosen.len() + level.len() <= p {
            chosen.extend(level);
            continue;
        }
        let mut pending = level;
        while chosen.len() < p {
            let selected: Vec<&Individual> = chosen.iter().map(|&i| &candidates[i]).collect();
            let pos = (0..pending.len())
                .min_by(|&a, &b| {
                    let (ca, cb) = (&candidates[pending[a]], &candidates[pending[b]]);
                    density_value(ca, &selected)
                        .cmp(&density_value(cb, &selected))
                        .then_with(|| rank_order(ca, cb))
                })
                .expect("overflow level is non-empty");
            chosen.push(pending.remove(pos));
        }
    }
    Ok(chosen)
}

/// Merges parents and offspring and returns the `p` survivors.
pub fn select_survivors(
    parents: Vec<Individual>,
    offspring: Vec<Individual>,
    p: usize,
    alpha: f64,
) -> Result<Vec<Individual>, SelectionError> {
    let mut all = parents;
    all.extend(offspring);
    let picked = environmental_select(&all, p, alpha)?;
    let mut slots: Vec<Option<Individual>> = all.into_iter().map(Some).collect();
    Ok(picked.into_iter().map(|i| slots[i].take().expect("indices are distinct")).collect())
}

/// Which member of a fine-stage contest wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineChoice {
    Old,
    Mutated,
    Pruned,
}

/// Best of `{old, mutated, pruned}`. Ties go to `old`, then to fewer live
/// nodes, then to the smaller genome digest. A prune that did nothing is
/// passed as `None` and does not compete.
pub fn fine_select_best(
    old: &Individual,
    mutated: &Individual,
    pruned: Option<&Individual>,
    lib: &CellLibrary,
) -> Result<FineChoice, SelectionError> {
    let mut entries = vec![(FineChoice::Old, old), (FineChoice::Mutated, mutated)];
    if let Some(p) = pruned {
        entries.push((FineChoice::Pruned, p));
    }
    if let Some(i) = entries.iter().position(|(_, ind)| !ind.is_evaluated()) {
        return Err(SelectionError::Unevaluated(i));
    }
    let better = |a: &(FineChoice, &Individual), b: &(FineChoice, &Individual)| -> Ordering {
        b.1.score()
            .total_cmp(&a.1.score())
            .then_with(|| (b.0 == FineChoice::Old).cmp(&(a.0 == FineChoice::Old)))
            .then_with(|| a.1.genome.live_nodes(lib).cmp(&b.1.genome.live_nodes(lib)))
            .then_with(|| a.1.digest().cmp(&b.1.digest()))
    };
    Ok(entries.into_iter().min_by(better).expect("non-empty").0)
}
