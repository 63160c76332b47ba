use serde::{Deserialize, Serialize};

use crate::evolution::Individual;

pub const HISTORY_HEADER: &str = "generation,best,mean,median_N";

/// Population summary after one generation of either stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based, counted across both stages.
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub median_n: f64,
}

impl HistoryRow {
    pub fn summarize(generation: usize, members: &[Individual]) -> Self {
        let scores: Vec<f64> = members.iter().map(Individual::score).collect();
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let mut depths: Vec<usize> = members.iter().map(Individual::depth).collect();
        depths.sort_unstable();
        HistoryRow { generation, best, mean, median_n: median(&depths) }
    }
}

fn median(sorted: &[usize]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2] as f64,
        n => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.generation, r.best, r.mean, r.median_n));
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>, String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == HISTORY_HEADER => {}
        Some((_, h)) => return Err(format!("unexpected header {h:?}")),
        None => return Err("history is empty".into()),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || format!("line {}: malformed row {line:?}", i + 1);
        if fields.len() != 4 {
            return Err(bad());
        }
        rows.push(HistoryRow {
            generation: fields[0].parse().map_err(|_| bad())?,
            best: fields[1].parse().map_err(|_| bad())?,
            mean: fields[2].parse().map_err(|_| bad())?,
            median_n: fields[3].parse().map_err(|_| bad())?,
        });
    }
    if rows.is_empty() {
        return Err("history has no rows".into());
    }
    Ok(rows)
}
