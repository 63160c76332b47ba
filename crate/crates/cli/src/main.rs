//! `cellevo`: run, resume and inspect two-stage cell-based architecture searches.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or input error,
//! 3 evaluator error, 4 checkpoint error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cellevo::engine::{
    ablate, build_evaluator, parse_history_csv, write_artifacts, AblationMode, Backend, Engine, EngineError,
    HistoryRow, SearchConfig,
};
use cellevo::genome::{decode_to_network, export_dot, Genome, GenomeFileError};
use cellevo::search_space::{CellLibrary, LibraryError};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_EVALUATOR: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Parser)]
#[command(name = "cellevo", version, about = "Two-stage evolutionary search over cell-based networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write best.genome.json, best.dot, history.csv and a checkpoint.
    Run(RunArgs),
    /// Continue a search from its checkpoint directory.
    Resume(ResumeArgs),
    /// Decode a genome to its layer graph.
    Decode(DecodeArgs),
    /// Print the best individual of a checkpoint.
    ExportBest(ExportArgs),
    /// Compare the full algorithm against one ablation over several seeds.
    Ablate(AblateArgs),
    /// Summarize a history.csv by phase and by generation window.
    Stats(StatsArgs),
    /// Check a genome file; violations go to standard error.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Overrides {
    /// Overrides the seed in the config file (which overrides TSENAS_SEED).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["surrogate", "external"])]
    backend: Option<String>,
    /// Worker command for the external backend.
    #[arg(long)]
    worker_cmd: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory (default: <out>/checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Refuse to resume unless the checkpoint was written under this config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory (default: the checkpoint's parent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Dot,
    Json,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    genome: PathBuf,
    #[arg(long, value_enum, default_value = "dot")]
    format: Format,
    /// Config supplying depth bounds and decode settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// One of no-fine-stage, no-weight-inheritance, single-point-crossover,
    /// drop-cell-mutation, drop-connect-mutation, drop-node-mutation,
    /// drop-edge-mutation, no-pruning.
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    history: PathBuf,
    /// Config of the run; defaults to config.json beside the history.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    genome: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Input problem reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct InputError(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Resume(a) => cmd_resume(a),
        Command::Decode(a) => cmd_decode(a),
        Command::ExportBest(a) => cmd_export_best(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<EngineError>() {
            return match e {
                EngineError::Config(_) | EngineError::UnknownAblation(_) => EXIT_CONFIG,
                EngineError::Eval { .. } => EXIT_EVALUATOR,
                EngineError::Checkpoint { .. } | EngineError::ConfigMismatch { .. } => EXIT_CHECKPOINT,
                _ => EXIT_OTHER,
            };
        }
        if cause.is::<InputError>() || cause.is::<GenomeFileError>() || cause.is::<LibraryError>() {
            return EXIT_CONFIG;
        }
    }
    EXIT_OTHER
}

/// Loads a config with seed precedence flag > file > TSENAS_SEED > 0.
fn load_config(path: &Path, overrides: &Overrides) -> Result<SearchConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: SearchConfig =
        serde_json::from_value(raw.clone()).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
    if raw.get("seed").is_none() {
        if let Ok(s) = std::env::var("TSENAS_SEED") {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| EngineError::Config(format!("TSENAS_SEED={s:?} is not an unsigned integer")))?;
        }
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(b) = &overrides.backend {
        cfg.backend = b.parse::<Backend>().map_err(EngineError::Config)?;
    }
    if let Some(cmd) = &overrides.worker_cmd {
        cfg.worker_cmd = Some(cmd.clone());
    }
    match cfg.validate() {
        Err(EngineError::Config(m)) => Err(EngineError::Config(format!("{}: {m}", path.display())).into()),
        other => Ok(other.map(|()| cfg)?),
    }
}

/// Config for commands that only need bounds and decode settings.
fn optional_config(path: Option<&Path>) -> Result<SearchConfig> {
    match path {
        Some(p) => Ok(SearchConfig::load(p)?),
        None => Ok(SearchConfig::default()),
    }
}

/// Writes the worker's argument file and returns its path.
fn write_worker_config(out: &Path, checkpoint: &Path, cfg: &SearchConfig) -> Result<PathBuf> {
    let path = out.join("worker_config.json");
    let doc = serde_json::json!({
        "dataset": cfg.dataset_id,
        "weights_dir": checkpoint.join("weights"),
        "epochs_individual": cfg.epochs_individual,
        "epochs_supernet": cfg.epochs_supernet,
        "decode": cfg.decode,
    });
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn drive(mut engine: Engine, out: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = engine.config().clone();
    let lib = engine.library().clone();
    let worker_config = match cfg.backend {
        Backend::External => Some(write_worker_config(out, checkpoint, &cfg)?),
        Backend::Surrogate => None,
    };
    let mut ev = build_evaluator(&cfg, &lib, worker_config)?;
    let result = engine.run(ev.as_mut(), Some(checkpoint))?;
    write_artifacts(out, &result, &cfg, &lib)?;
    eprintln!(
        "best fitness {:.6} after {} evaluations in {:.2?}; artifacts in {}",
        result.best.score(),
        result.evaluations,
        result.wall_time,
        out.display()
    );
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let checkpoint = a.checkpoint.unwrap_or_else(|| a.out.join("checkpoint"));
    let engine = Engine::new(cfg, CellLibrary::default())?;
    drive(engine, &a.out, &checkpoint)
}

fn cmd_resume(a: ResumeArgs) -> Result<()> {
    let expected = match &a.config {
        Some(p) => Some(load_config(p, &a.overrides)?),
        None => None,
    };
    let engine = Engine::resume(&a.checkpoint, CellLibrary::default(), expected.as_ref())?;
    let out = match a.out {
        Some(o) => o,
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    drive(engine, &out, &a.checkpoint)
}

fn print_genome(genome: &Genome, cfg: &SearchConfig, lib: &CellLibrary, format: Format) -> Result<()> {
    let g2 = genome.to_stage2(lib, cfg.bounds()).map_err(|v| InputError(format!("invalid genome: {v}")))?;
    let net = decode_to_network(&g2, lib, &cfg.decode).map_err(|e| InputError(e.to_string()))?;
    match format {
        Format::Dot => print!("{}", export_dot(&net)),
        Format::Json => println!("{}", serde_json::to_string_pretty(&net)?),
    }
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let cfg = optional_config(a.config.as_deref())?;
    let lib = CellLibrary::default();
    let genome = cellevo::genome::read_genome(&a.genome, &lib, cfg.bounds())?;
    print_genome(&genome, &cfg, &lib, a.format)
}

fn cmd_export_best(a: ExportArgs) -> Result<()> {
    let lib = CellLibrary::default();
    let engine = Engine::resume(&a.checkpoint, lib.clone(), None)?;
    let best = engine
        .best()
        .ok_or_else(|| EngineError::Checkpoint { path: a.checkpoint.clone(), reason: "no evaluated individual".into() })?;
    match a.format {
        Format::Json => print!("{}", best.genome.to_json()),
        Format::Dot => print_genome(&best.genome, engine.config(), &lib, Format::Dot)?,
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let mode: AblationMode = a.mode.parse()?;
    let lib = CellLibrary::default();
    let mut make = |c: &SearchConfig| build_evaluator(c, &lib, None);
    let report = ablate(&cfg, mode, a.runs, &lib, &mut make)?;
    print!("{}", report.to_text());
    if let Some(path) = a.report {
        fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Window size and count for a history of `g` generations: 30-generation
/// windows, or five equal windows once the history reaches 150 generations.
fn windows(g: usize) -> (usize, usize) {
    if g >= 150 {
        let size = g.div_ceil(5);
        (size, g.div_ceil(size))
    } else {
        (30, g.div_ceil(30))
    }
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let text = fs::read_to_string(&a.history).map_err(|e| InputError(format!("{}: {e}", a.history.display())))?;
    let rows = parse_history_csv(&text).map_err(|e| InputError(format!("{}: {e}", a.history.display())))?;
    let config_path = a
        .config
        .clone()
        .or_else(|| a.history.parent().map(|p| p.join("config.json")).filter(|p| p.exists()));
    let rough = match config_path {
        Some(p) => Some(SearchConfig::load(&p)?.rough_generations.min(rows.len())),
        None => None,
    };

    println!("generations: {}", rows.len());
    let phase = |name: &str, rs: &[HistoryRow]| {
        if rs.is_empty() {
            return;
        }
        let best = rs.iter().map(|r| r.best).fold(f64::NEG_INFINITY, f64::max);
        let mean = rs.iter().map(|r| r.mean).sum::<f64>() / rs.len() as f64;
        println!("{name}: generations {}-{}, best {best:.6}, mean of means {mean:.6}", rs[0].generation, rs[rs.len() - 1].generation);
    };
    match rough {
        Some(t0) => {
            phase("rough", &rows[..t0]);
            phase("fine", &rows[t0..]);
        }
        None => phase("all", &rows),
    }

    let (size, count) = windows(rows.len());
    println!("windows: {count} of up to {size} generations");
    println!("window,first,last,best,mean,median_N_min,median_N_median,median_N_max");
    for (w, chunk) in rows.chunks(size).enumerate() {
        let best = chunk.iter().map(|r| r.best).fold(f64::NEG_INFINITY, f64::max);
        let mean = chunk.iter().map(|r| r.mean).sum::<f64>() / chunk.len() as f64;
        let mut ns: Vec<f64> = chunk.iter().map(|r| r.median_n).collect();
        ns.sort_by(f64::total_cmp);
        let mid = if ns.len() % 2 == 1 { ns[ns.len() / 2] } else { (ns[ns.len() / 2 - 1] + ns[ns.len() / 2]) / 2.0 };
        println!(
            "{},{},{},{best:.6},{mean:.6},{},{mid},{}",
            w + 1,
            chunk[0].generation,
            chunk[chunk.len() - 1].generation,
            ns[0],
            ns[ns.len() - 1]
        );
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let cfg = optional_config(a.config.as_deref())?;
    let lib = CellLibrary::default();
    let text = fs::read_to_string(&a.genome).map_err(|e| InputError(format!("{}: {e}", a.genome.display())))?;
    let genome = Genome::from_json_unchecked(&text)?;
    if let Err(v) = genome.validate(&lib, cfg.bounds()) {
        for violation in &v.0 {
            eprintln!("{}: {violation}", a.genome.display());
        }
        return Err(anyhow!(InputError(format!("{} violation(s)", v.0.len()))));
    }
    println!("{}: valid stage-{} genome, {} cells", a.genome.display(), genome.stage(), genome.depth());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        assert_eq!(windows(1), (30, 1));
        assert_eq!(windows(20), (30, 1));
        assert_eq!(windows(31), (30, 2));
        assert_eq!(windows(149), (30, 5));
        assert_eq!(windows(150), (30, 5));
        assert_eq!(windows(151), (31, 5));
        assert_eq!(windows(1000), (200, 5));
    }

    #[test]
    fn bail_is_other_error() {
        let e = anyhow!("x");
        assert_eq!(exit_code(&e), EXIT_OTHER);
        assert_eq!(exit_code(&anyhow!(InputError("bad".into()))), EXIT_CONFIG);
    }
}
