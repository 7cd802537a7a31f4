//! Single-binary command surface: dataset annotation, cohort selection,
//! training, evaluation, threshold sweeps, gradient verification, and
//! checkpoint inspection.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{ArgGroup, Parser, Subcommand};

use relay_mdm::config::{load_config, FileConfig};
use relay_mdm::diffusion::ModelStepper;
use relay_mdm::error::{Error, Result};
use relay_mdm::eval::{
    emit_report, evaluate_set, report_file_name, sweep, ReportFormat, Slice,
};
use relay_mdm::model::checkpoint::load_model;
use relay_mdm::model::{parameter_count, ModelConfig, ModelParams};
use relay_mdm::sudoku::dataset::{
    annotate_records, attach_annotations, cohort_filter, is_cohort_member, parse_record,
    read_annotations, read_puzzle_file, write_puzzle_file, AnnotationRecord, PuzzleRecord,
};
use relay_mdm::training::{
    grad_check, gradcheck_config, run_training, Objective, TrainConfig, GRAD_TOL,
};

#[derive(Parser)]
#[command(
    name = "relay-mdm",
    version,
    about = "Masked diffusion over Sudoku with a relay state carried across denoising steps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn objective_arg(s: &str) -> std::result::Result<Objective, String> {
    Objective::from_str(s).map_err(|e| e.to_string())
}

fn slice_arg(s: &str) -> std::result::Result<Slice, String> {
    Slice::from_str(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Solve every puzzle and write a JSONL sidecar of strategy traces.
    ///
    /// Safe to interrupt: finished lines stay on disk and a rerun skips
    /// them. Malformed input lines are logged, skipped, and counted.
    Annotate {
        /// Puzzle file, one puzzle,solution pair per line.
        #[arg(long)]
        data: PathBuf,
        /// Sidecar path; appended to when it already exists.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Keep records whose solve trace uses an Advanced or Master
    /// strategy and never backtracks, writing them as a puzzle file.
    Cohort {
        #[arg(long)]
        data: PathBuf,
        /// Sidecar produced by annotate.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep at most this many records.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a model, checkpointing at the validation cadence.
    Train {
        /// Flat key = value file; omitted keys use defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, metrics.csv, and validation
        /// frontiers.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the objective and aligns the relay architecture
        /// with it.
        #[arg(long, value_parser = objective_arg)]
        objective: Option<Objective>,
        /// Overrides embedding tying.
        #[arg(long)]
        tied: Option<bool>,
        /// Overrides the unroll horizon.
        #[arg(long = "K")]
        k: Option<usize>,
        /// Resume from this training checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Decode a dataset at one threshold and report the metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sidecar; required for --slice deduction_only.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, default_value_t = 0.15)]
        tau: f64,
        #[arg(long, value_parser = slice_arg, default_value = "unfiltered")]
        slice: Slice,
        /// Evaluate only the first N records of the slice.
        #[arg(long)]
        n: Option<usize>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Decode across a threshold grid and write the frontier table.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15,0.2,0.25")]
        taus: Vec<f64>,
        #[arg(long, value_parser = slice_arg, default_value = "unfiltered")]
        slice: Slice,
        #[arg(long)]
        n: Option<usize>,
        /// Directory receiving the CSV and JSON tables.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Compare analytic gradients against finite differences on a
    /// frozen rollout of the reduced architecture.
    Gradcheck {
        #[arg(long, value_parser = objective_arg)]
        objective: Objective,
        /// Unroll horizon; defaults to 1 for mlm and 2 otherwise.
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report the parameter count and layout of a config or checkpoint.
    #[command(group = ArgGroup::new("source").required(true).args(["config", "checkpoint"]))]
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn init_workers(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Annotate { data, out, workers } => {
            init_workers(workers)?;
            annotate_cmd(&data, &out)
        }
        Command::Cohort { data, annotations, out, n } => cohort_cmd(&data, &annotations, &out, n),
        Command::Train { config, data, out, seed, objective, tied, k, checkpoint, workers } => {
            init_workers(workers)?;
            train_cmd(config.as_deref(), &data, &out, seed, objective, tied, k, checkpoint.as_deref())
        }
        Command::Eval { checkpoint, data, annotations, tau, slice, n, out, workers } => {
            init_workers(workers)?;
            eval_cmd(&checkpoint, &data, annotations.as_deref(), tau, slice, n, out.as_deref())
        }
        Command::Sweep { checkpoint, data, annotations, taus, slice, n, out, workers } => {
            init_workers(workers)?;
            sweep_cmd(&checkpoint, &data, annotations.as_deref(), &taus, slice, n, &out)
        }
        Command::Gradcheck { objective, k, seed } => gradcheck_cmd(objective, k, seed),
        Command::Inspect { config, checkpoint } => {
            inspect_cmd(config.as_deref(), checkpoint.as_deref())
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a possibly torn sidecar, returning its records and the byte
/// length of the clean prefix. A JSON error on the final line is
/// treated as an interrupted write: the line is dropped and excluded
/// from the clean length so the caller can truncate it away before
/// appending.
fn read_sidecar_lenient(path: &Path) -> Result<(Vec<AnnotationRecord>, u64)> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut clean_len = 0u64;
    let mut offset = 0u64;
    let mut lineno = 0usize;
    let mut torn: Option<String> = None;
    for piece in text.split_inclusive('\n') {
        let end = offset + piece.len() as u64;
        let line = piece.trim();
        lineno += 1;
        if !line.is_empty() {
            let parsed = serde_json::from_str::<AnnotationRecord>(line);
            if torn.is_some() {
                // Anything after a bad line means mid-file corruption,
                // not an interrupted write.
                return Err(Error::Format(format!(
                    "{}:{}: corrupt sidecar line: {}",
                    path.display(),
                    lineno - 1,
                    torn.unwrap(),
                )));
            }
            match parsed {
                Ok(rec) => {
                    out.push(rec);
                    clean_len = end;
                }
                Err(e) => torn = Some(e.to_string()),
            }
        }
        offset = end;
    }
    if let Some(e) = torn {
        eprintln!("annotate: dropping torn final sidecar line ({e})");
    }
    Ok((out, clean_len))
}

/// Lenient puzzle-file read for annotation: malformed lines are logged
/// and skipped rather than failing the run.
fn read_puzzles_lenient(path: &Path) -> Result<(Vec<PuzzleRecord>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut malformed = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_record(line) {
            Ok(r) => records.push(r),
            Err(e) => {
                malformed += 1;
                eprintln!("annotate: {}:{}: skipping line: {e}", path.display(), lineno + 1);
            }
        }
    }
    Ok((records, malformed))
}

fn annotate_cmd(data: &Path, out: &Path) -> Result<()> {
    let (mut records, malformed) = read_puzzles_lenient(data)?;
    let (existing, clean_len) = if out.exists() {
        read_sidecar_lenient(out)?
    } else {
        (Vec::new(), 0)
    };
    let done: BTreeMap<usize, &AnnotationRecord> =
        existing.iter().map(|a| (a.index, a)).collect();

    let todo: Vec<usize> = (0..records.len()).filter(|i| !done.contains_key(i)).collect();
    let total = todo.len();
    let mut sidecar = fs::OpenOptions::new().create(true).append(true).open(out)?;
    // Chop any torn tail so the append continues a well-formed file.
    sidecar.set_len(clean_len)?;

    // Work in slabs so an interrupted run keeps its finished lines and
    // progress stays visible on long files.
    let mut written = 0usize;
    for chunk in todo.chunks(256) {
        let mut slab: Vec<PuzzleRecord> =
            chunk.iter().map(|&i| records[i].clone()).collect();
        annotate_records(&mut slab)?;
        for (&i, solved) in chunk.iter().zip(&slab) {
            records[i] = solved.clone();
            let ann = records[i].annotation.as_ref().expect("just annotated");
            let line = AnnotationRecord::from_annotation(i, ann, false);
            writeln!(sidecar, "{}", serde_json::to_string(&line)?)?;
        }
        sidecar.flush()?;
        written += chunk.len();
        eprintln!("annotate: {written}/{total}");
    }
    sidecar.sync_all()?;

    println!(
        "annotated {written} records ({} already present, {malformed} malformed lines skipped)",
        done.len()
    );
    Ok(())
}

fn cohort_cmd(data: &Path, annotations: &Path, out: &Path, n: Option<usize>) -> Result<()> {
    let mut records = read_puzzle_file(data)?;
    let anns = read_annotations(annotations)?;
    attach_annotations(&mut records, &anns)?;
    let kept = cohort_filter(&records, n.unwrap_or(usize::MAX))?;

    let tmp = out.with_extension("tmp");
    write_puzzle_file(&tmp, &kept)?;
    fs::rename(&tmp, out)?;
    println!("cohort: kept {} of {} records", kept.len(), records.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    objective: Option<Objective>,
    tied: Option<bool>,
    k: Option<usize>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => load_config(path)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(objective) = objective {
        cfg.train.objective = objective;
        cfg.model.relay_enabled = objective.uses_relay();
        if objective == Objective::Mlm {
            cfg.train.k = 1;
        }
    }
    if let Some(tied) = tied {
        cfg.model.tie_embeddings = tied;
    }
    if let Some(k) = k {
        cfg.train.k = k;
    }

    let records = read_puzzle_file(data)?;
    let final_ckpt = run_training(&cfg.model, &cfg.train, &records, out, checkpoint)?;
    println!("trained to step {}: {}", cfg.train.total_steps, final_ckpt.display());
    Ok(())
}

/// Loads records and reduces them to the requested slice, attaching the
/// sidecar when one is given.
fn load_slice(
    data: &Path,
    annotations: Option<&Path>,
    slice: Slice,
    n: Option<usize>,
) -> Result<Vec<PuzzleRecord>> {
    let mut records = read_puzzle_file(data)?;
    if let Some(path) = annotations {
        let anns = read_annotations(path)?;
        attach_annotations(&mut records, &anns)?;
    }
    let records: Vec<PuzzleRecord> = match slice {
        Slice::Unfiltered => records,
        Slice::DeductionOnly => {
            if annotations.is_none() {
                return Err(Error::Config(
                    "--slice deduction_only needs --annotations".into(),
                ));
            }
            let mut kept = Vec::new();
            for (i, r) in records.into_iter().enumerate() {
                let ann = r.annotation.as_ref().ok_or(Error::MissingAnnotation(i))?;
                if is_cohort_member(ann) {
                    kept.push(r);
                }
            }
            kept
        }
    };
    Ok(match n {
        Some(n) => records.into_iter().take(n).collect(),
        None => records,
    })
}

fn load_eval_model(path: &Path) -> Result<(ModelParams<f32>, Option<Objective>, u64)> {
    let (params, container) = load_model(path)?;
    let meta = &container.meta;
    let (objective, seed) = match meta.get("train_config") {
        Some(tc) => {
            let tc: TrainConfig = serde_json::from_value(tc.clone())?;
            (Some(tc.objective), tc.seed)
        }
        None => (None, 0),
    };
    Ok((params, objective, seed))
}

fn eval_cmd(
    checkpoint: &Path,
    data: &Path,
    annotations: Option<&Path>,
    tau: f64,
    slice: Slice,
    n: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let (params, _, _) = load_eval_model(checkpoint)?;
    let records = load_slice(data, annotations, slice, n)?;
    let make = || ModelStepper::new(&params);
    let report = evaluate_set(&make, &records, tau, slice)?;

    println!("slice: {}", report.slice);
    println!("tau: {:.6}", report.tau);
    println!("n: {}", report.n);
    println!("exact_match: {:.6}", report.exact_match);
    println!("mean_nfe: {:.6}", report.mean_nfe);
    println!("legal_final_rate: {:.6}", report.legal_final_rate);
    println!("mean_rollout_violations: {:.6}", report.mean_rollout_violations);
    if let Some(path) = out {
        write_atomic(path, serde_json::to_string(&report)?.as_bytes())?;
    }
    Ok(())
}

fn sweep_cmd(
    checkpoint: &Path,
    data: &Path,
    annotations: Option<&Path>,
    taus: &[f64],
    slice: Slice,
    n: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (params, objective, seed) = load_eval_model(checkpoint)?;
    let objective = objective.ok_or_else(|| {
        Error::Config("checkpoint lacks training metadata; cannot label the frontier".into())
    })?;
    let records = load_slice(data, annotations, slice, n)?;
    let make = || ModelStepper::new(&params);
    let table = sweep(
        &make,
        &records,
        taus,
        slice,
        objective,
        params.config.tie_embeddings,
        seed,
    )?;

    fs::create_dir_all(out)?;
    for format in [ReportFormat::Csv, ReportFormat::Json] {
        let name = report_file_name(objective, params.config.tie_embeddings, slice, format);
        emit_report(&table, &out.join(name), format)?;
    }
    for row in &table.rows {
        let r = &row.report;
        println!(
            "tau {:.2}: exact_match {:.4} mean_nfe {:.2} legal_final {:.4}",
            r.tau, r.exact_match, r.mean_nfe, r.legal_final_rate
        );
    }
    Ok(())
}

fn gradcheck_cmd(objective: Objective, k: Option<usize>, seed: u64) -> Result<()> {
    let k = k.unwrap_or(if objective == Objective::Mlm { 1 } else { 2 });
    let mcfg = gradcheck_config(objective);
    let report = grad_check(&mcfg, objective, k, seed)?;
    println!(
        "objective: {} K: {} coords: {} below_floor: {} max_rel_err: {:.3e}",
        report.objective, report.k, report.coords, report.below_floor, report.max_rel_err
    );
    println!(
        "worst: {} analytic {:.6e} numeric {:.6e}",
        report.worst_array, report.worst_analytic, report.worst_numeric
    );
    if report.max_rel_err < GRAD_TOL {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "max relative error {:.3e} is not below {GRAD_TOL:.0e}",
            report.max_rel_err
        )))
    }
}

fn describe_config(cfg: &ModelConfig) {
    println!("params: {}", parameter_count(cfg));
    println!(
        "architecture: {} layers, d_model {}, d_ff {}, {} heads x {}",
        cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim
    );
    println!("relay_enabled: {}", cfg.relay_enabled);
    println!("tie_embeddings: {}", cfg.tie_embeddings);
    println!("vocab: {} seq_len: {}", cfg.vocab_size, cfg.seq_len);
}

fn inspect_cmd(config: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    match (config, checkpoint) {
        (Some(path), None) => {
            let cfg = load_config(path)?;
            describe_config(&cfg.model);
            println!("objective: {}", cfg.train.objective);
        }
        (None, Some(path)) => {
            let (_, container) = load_model(path)?;
            describe_config(&container.config);
            if let Some(step) = container.meta.get("step").and_then(|v| v.as_u64()) {
                println!("step: {step}");
            }
            if let Some(tc) = container.meta.get("train_config") {
                if let Ok(tc) = serde_json::from_value::<TrainConfig>(tc.clone()) {
                    println!("objective: {}", tc.objective);
                }
            }
        }
        _ => unreachable!("clap group enforces exactly one source"),
    }
    Ok(())
}
