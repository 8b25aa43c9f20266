//! tabenc: batch tooling for the joint utterance/table encoder.
//!
//! Four subcommands cover the pipeline end to end: `preprocess` cleans a
//! JSONL corpus into training instances, `pretrain` optimizes the encoder
//! over those instances, `encode` turns one utterance/table pair into
//! vector representations, and `inspect` dumps the intermediate stages
//! (snapshot, linearization, mask plan) without needing a checkpoint.
//!
//! Exit codes: 0 on success, 1 for runtime failures, 2 for usage or
//! configuration errors. Every subcommand is deterministic given its inputs
//! and `--seed`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tabenc::checkpoint::{load_checkpoint, save_checkpoint};
use tabenc::corpus::{load_instances, parse_table, prepare_corpus};
use tabenc::encoder::{encode, ColumnPooling, ModelConfig, ModelParams};
use tabenc::linearize::{build_input_from_snapshot, Linearization};
use tabenc::mask::make_mask_plan;
use tabenc::optim::{train, AdamState, TrainConfig};
use tabenc::snapshot::{create_snapshot, RowSource};
use tabenc::table::{words, Table, Utterance};
use tabenc::tokenizer::Vocab;

#[derive(Parser)]
#[command(name = "tabenc", version, about = "Joint encoder for utterances and relational tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a JSONL corpus and write training instances.
    Preprocess(PreprocessArgs),
    /// Pretrain the encoder on prepared instances.
    Pretrain(PretrainArgs),
    /// Encode one utterance/table pair with a trained checkpoint.
    Encode(EncodeArgs),
    /// Show snapshot selection, linearization, and a sample mask plan.
    Inspect(InspectArgs),
}

/// Model options shared by the subcommands that build a [`ModelConfig`].
/// Precedence: CLI flag > config file field > default.
#[derive(Args, Default)]
struct ModelOpts {
    /// JSON config file; CLI flags override its fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Snapshot rows per instance (K).
    #[arg(long)]
    k: Option<usize>,
    /// Vertical attention layers.
    #[arg(long)]
    vertical_layers: Option<usize>,
    /// Cell template: name_only | name_type | name_type_value | name_is_value.
    #[arg(long)]
    linearization: Option<String>,
    /// Hidden dimension.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    num_heads: Option<usize>,
    /// Feed-forward inner dimension.
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Base transformer layers.
    #[arg(long)]
    num_layers: Option<usize>,
    /// Maximum linearized row length in sub-tokens.
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Dropout probability (training only).
    #[arg(long)]
    dropout: Option<f64>,
    /// Learned position slots for cell value recovery.
    #[arg(long)]
    cvr_positions: Option<usize>,
    /// Column pooling: cell_pool | name_token_pool.
    #[arg(long)]
    column_pooling: Option<String>,
}

/// Optional fields accepted in a `--config` JSON file.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    k: Option<usize>,
    vertical_layers: Option<usize>,
    linearization: Option<String>,
    hidden_dim: Option<usize>,
    num_heads: Option<usize>,
    ffn_dim: Option<usize>,
    num_layers: Option<usize>,
    max_seq_len: Option<usize>,
    dropout: Option<f64>,
    cvr_positions: Option<usize>,
    column_pooling: Option<String>,
    steps: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
    rows_per_instance: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// JSONL corpus: one {id, columns, rows, context} object per line.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Vocabulary file, one sub-token per line.
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Output JSONL file of training instances.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Rows sampled per instance.
    #[arg(long)]
    rows_per_instance: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; CLI flags override its fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Training instances written by `preprocess`.
    #[arg(long, value_name = "FILE")]
    instances: PathBuf,
    /// Vocabulary file, one sub-token per line.
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Output checkpoint path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Resume from this checkpoint (model flags must match it).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Total optimization steps (also the LR schedule's denominator).
    #[arg(long)]
    steps: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Instances per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Master seed (initialization, batches, masking, dropout).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write `<out>.step<N>` every N steps (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Append the per-step JSON log lines to this file as well as stdout.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct EncodeArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Vocabulary file used at training time.
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Table file: one JSON object in the corpus schema, without `context`.
    #[arg(long, value_name = "FILE")]
    table: PathBuf,
    /// Utterance text.
    #[arg(long)]
    utterance: String,
    /// Write the JSON here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct InspectArgs {
    /// Vocabulary file, one sub-token per line.
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Table file: one JSON object in the corpus schema, without `context`.
    #[arg(long, value_name = "FILE")]
    table: PathBuf,
    /// Utterance text.
    #[arg(long)]
    utterance: String,
    /// Seed for the sample mask plan.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelOpts,
}

/// A failure plus the exit code it maps to.
enum CliError {
    /// Usage or configuration problem detectable up front: exit 2.
    Usage(String),
    /// Failure while doing the actual work: exit 1.
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: tabenc::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(args) => run_preprocess(args),
        Command::Pretrain(args) => run_pretrain(args),
        Command::Encode(args) => run_encode(args),
        Command::Inspect(args) => run_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_vocab(path: &Path) -> CliResult<Vocab> {
    require_file(path, "vocab file")?;
    Vocab::load(path).map_err(|e| usage(format!("invalid vocab {}: {e}", path.display())))
}

fn load_file_config(path: &Option<PathBuf>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    require_file(path, "config file")?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

/// Layer `file` then `flags` onto `base` and validate the result.
fn resolve_model(base: ModelConfig, file: &FileConfig, flags: &ModelOpts) -> CliResult<ModelConfig> {
    let mut c = base;
    let parse_lin = |s: &str| s.parse::<Linearization>().map_err(|e| usage(e.to_string()));
    let parse_pool = |s: &str| s.parse::<ColumnPooling>().map_err(|e| usage(e.to_string()));

    for (field, value) in [
        (&mut c.k, file.k),
        (&mut c.vertical_layers, file.vertical_layers),
        (&mut c.hidden_dim, file.hidden_dim),
        (&mut c.num_heads, file.num_heads),
        (&mut c.ffn_dim, file.ffn_dim),
        (&mut c.num_layers, file.num_layers),
        (&mut c.max_seq_len, file.max_seq_len),
        (&mut c.cvr_positions, file.cvr_positions),
    ] {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(d) = file.dropout {
        c.dropout = d;
    }
    if let Some(s) = &file.linearization {
        c.linearization = parse_lin(s)?;
    }
    if let Some(s) = &file.column_pooling {
        c.column_pooling = parse_pool(s)?;
    }

    for (field, value) in [
        (&mut c.k, flags.k),
        (&mut c.vertical_layers, flags.vertical_layers),
        (&mut c.hidden_dim, flags.hidden_dim),
        (&mut c.num_heads, flags.num_heads),
        (&mut c.ffn_dim, flags.ffn_dim),
        (&mut c.num_layers, flags.num_layers),
        (&mut c.max_seq_len, flags.max_seq_len),
        (&mut c.cvr_positions, flags.cvr_positions),
    ] {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(d) = flags.dropout {
        c.dropout = d;
    }
    if let Some(s) = &flags.linearization {
        c.linearization = parse_lin(s)?;
    }
    if let Some(s) = &flags.column_pooling {
        c.column_pooling = parse_pool(s)?;
    }

    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

/// Fields whose change would alter parameter shapes or meanings relative to
/// a checkpoint; overriding them on `encode`/resume is a config error.
fn check_checkpoint_compat(resolved: &ModelConfig, ck: &ModelConfig) -> CliResult<()> {
    let fixed = [
        ("hidden_dim", resolved.hidden_dim, ck.hidden_dim),
        ("num_heads", resolved.num_heads, ck.num_heads),
        ("ffn_dim", resolved.ffn_dim, ck.ffn_dim),
        ("num_layers", resolved.num_layers, ck.num_layers),
        ("vertical_layers", resolved.vertical_layers, ck.vertical_layers),
        ("max_seq_len", resolved.max_seq_len, ck.max_seq_len),
        ("cvr_positions", resolved.cvr_positions, ck.cvr_positions),
        ("vocab_size", resolved.vocab_size, ck.vocab_size),
    ];
    for (name, got, want) in fixed {
        if got != want {
            return Err(usage(format!(
                "{name}={got} conflicts with the checkpoint's {name}={want}"
            )));
        }
    }
    Ok(())
}

fn check_vocab_size(v: &Vocab, config: &ModelConfig) -> CliResult<()> {
    if v.len() != config.vocab_size {
        return Err(usage(format!(
            "vocab has {} entries but the model expects vocab_size={}",
            v.len(),
            config.vocab_size
        )));
    }
    Ok(())
}

fn parse_utterance(text: &str) -> CliResult<Utterance> {
    Utterance::new(words(text)).map_err(|_| usage("utterance must contain at least one word"))
}

fn load_table(path: &Path) -> CliResult<Table> {
    require_file(path, "table file")?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read table {}: {e}", path.display())))?;
    parse_table(&text).map_err(|e| usage(format!("invalid table {}: {e}", path.display())))
}

fn warn_if_k_exceeds_rows(k: usize, table: &Table) {
    if k > 1 && k > table.rows.len() {
        eprintln!(
            "warning: k={k} exceeds the table's {} rows; encoding with all rows",
            table.rows.len()
        );
    }
}

fn run_preprocess(args: PreprocessArgs) -> CliResult<()> {
    require_file(&args.corpus, "corpus file")?;
    let file = load_file_config(&args.config)?;
    let v = load_vocab(&args.vocab)?;
    let rows_per_instance = args.rows_per_instance.or(file.rows_per_instance).unwrap_or(3);
    if rows_per_instance == 0 {
        return Err(usage("rows-per-instance must be at least 1"));
    }
    let seed = args.seed.or(file.seed).unwrap_or(tabenc::optim::DEFAULT_SEED);

    let (instances, report) =
        prepare_corpus(&args.corpus, rows_per_instance, &v, seed).map_err(runtime)?;

    let out = std::fs::File::create(&args.out)
        .map_err(|e| usage(format!("cannot create {}: {e}", args.out.display())))?;
    let mut out = std::io::BufWriter::new(out);
    for inst in &instances {
        let line = serde_json::to_string(inst).map_err(|e| runtime(e.into()))?;
        writeln!(out, "{line}").map_err(|e| runtime(e.into()))?;
    }
    out.flush().map_err(|e| runtime(e.into()))?;

    let mut summary = serde_json::to_value(&report).map_err(|e| runtime(e.into()))?;
    summary["instances"] = serde_json::json!(instances.len());
    println!("{summary}");
    Ok(())
}

fn run_pretrain(args: PretrainArgs) -> CliResult<()> {
    require_file(&args.instances, "instances file")?;
    let file = load_file_config(&args.model.config)?;
    let v = load_vocab(&args.vocab)?;
    let instances = load_instances(&args.instances)
        .map_err(|e| usage(format!("invalid instances {}: {e}", args.instances.display())))?;

    // Resolve model + optimizer state, either fresh or from a checkpoint.
    let seed = args.seed.or(file.seed).unwrap_or(tabenc::optim::DEFAULT_SEED);
    let (config, mut params, mut state, start_step, default_steps) = match &args.checkpoint {
        Some(path) => {
            require_file(path, "checkpoint file")?;
            let ck = load_checkpoint(path)
                .map_err(|e| usage(format!("cannot load checkpoint {}: {e}", path.display())))?;
            let resolved = resolve_model(ck.config.clone(), &file, &args.model)?;
            check_checkpoint_compat(&resolved, &ck.config)?;
            check_vocab_size(&v, &resolved)?;
            let state = AdamState::from_checkpoint(&ck.params, &ck.opt, ck.step)
                .map_err(|e| usage(e.to_string()))?;
            (resolved, ck.params, state, ck.step, ck.total_steps)
        }
        None => {
            let config = resolve_model(ModelConfig::desk(v.len()), &file, &args.model)?;
            check_vocab_size(&v, &config)?;
            let params = ModelParams::init(&config, seed).map_err(|e| usage(e.to_string()))?;
            let state = AdamState::new(&params);
            (config, params, state, 0, TrainConfig::default().steps)
        }
    };

    let tc = TrainConfig {
        steps: args.steps.or(file.steps).unwrap_or(default_steps),
        lr: args.lr.or(file.lr).unwrap_or(tabenc::optim::DEFAULT_LR),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(tabenc::optim::DEFAULT_BATCH_SIZE),
        seed,
        checkpoint_every: args.checkpoint_every.or(file.checkpoint_every).unwrap_or(0),
    };
    if tc.batch_size == 0 {
        return Err(usage("batch-size must be at least 1"));
    }
    if instances.is_empty() && tc.steps > start_step {
        return Err(usage("no training instances; cannot train"));
    }

    let mut log_file = match &args.log {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path).map_err(
            |e| usage(format!("cannot create log {}: {e}", path.display())),
        )?)),
        None => None,
    };

    let stdout = std::io::stdout();
    let mut stdout = stdout.lock();
    train(&mut params, &mut state, &config, &tc, &instances, &v, start_step, |log, p, st| {
        let line = serde_json::to_string(log)?;
        writeln!(stdout, "{line}")?;
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{line}")?;
        }
        if tc.checkpoint_every > 0 && log.step % tc.checkpoint_every == 0 && log.step < tc.steps {
            let path = args.out.with_extension(format!(
                "{}step{}",
                args.out
                    .extension()
                    .map(|e| format!("{}.", e.to_string_lossy()))
                    .unwrap_or_default(),
                log.step
            ));
            save_checkpoint(&path, &config, log.step, tc.steps, p, &st.to_named(p))?;
        }
        Ok(())
    })
    .map_err(runtime)?;
    stdout.flush().map_err(|e| runtime(e.into()))?;
    if let Some(mut f) = log_file {
        f.flush().map_err(|e| runtime(e.into()))?;
    }

    save_checkpoint(&args.out, &config, state.t, tc.steps, &params, &state.to_named(&params))
        .map_err(runtime)?;
    Ok(())
}

fn run_encode(args: EncodeArgs) -> CliResult<()> {
    require_file(&args.checkpoint, "checkpoint file")?;
    let file = load_file_config(&args.model.config)?;
    let v = load_vocab(&args.vocab)?;
    let ck = load_checkpoint(&args.checkpoint)
        .map_err(|e| usage(format!("cannot load checkpoint {}: {e}", args.checkpoint.display())))?;
    let config = resolve_model(ck.config.clone(), &file, &args.model)?;
    check_checkpoint_compat(&config, &ck.config)?;
    check_vocab_size(&v, &config)?;

    let table = load_table(&args.table)?;
    let utterance = parse_utterance(&args.utterance)?;
    warn_if_k_exceeds_rows(config.k, &table);

    let enc = encode(&utterance, &table, &ck.params, &config, &v).map_err(runtime)?;
    let json = serde_json::to_string(&enc).map_err(|e| runtime(e.into()))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json + "\n").map_err(|e| runtime(e.into()))?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn run_inspect(args: InspectArgs) -> CliResult<()> {
    let file = load_file_config(&args.model.config)?;
    let v = load_vocab(&args.vocab)?;
    let table = load_table(&args.table)?;
    let utterance = parse_utterance(&args.utterance)?;

    // Inspect needs no parameters, so only the pipeline-shaping fields are
    // consulted; model-shape flags are accepted but irrelevant here.
    let k = args.model.k.or(file.k).unwrap_or(3);
    if k == 0 {
        return Err(usage("k must be at least 1"));
    }
    let template = match args.model.linearization.as_deref().or(file.linearization.as_deref()) {
        Some(s) => s.parse::<Linearization>().map_err(|e| usage(e.to_string()))?,
        None => Linearization::default(),
    };
    let max_seq_len = args.model.max_seq_len.or(file.max_seq_len).unwrap_or(256);
    let cvr_positions = args.model.cvr_positions.or(file.cvr_positions).unwrap_or(20);
    let seed = args.seed.or(file.seed).unwrap_or(tabenc::optim::DEFAULT_SEED);
    warn_if_k_exceeds_rows(k, &table);

    let stdout = std::io::stdout();
    let mut w = std::io::BufWriter::new(stdout.lock());
    let emit = |w: &mut dyn Write, s: String| -> CliResult<()> {
        writeln!(w, "{s}").map_err(|e| runtime(e.into()))
    };

    emit(&mut w, format!(
        "table {}: {} columns, {} rows",
        table.id,
        table.columns.len(),
        table.rows.len()
    ))?;
    emit(&mut w, format!("utterance: {}", utterance.tokens().join(" ")))?;
    emit(&mut w, String::new())?;

    let snapshot = create_snapshot(&utterance, &table, k).map_err(runtime)?;
    emit(&mut w, format!("content snapshot (k={k}, {} rows):", snapshot.n_rows()))?;
    for (r, row) in snapshot.rows.iter().enumerate() {
        match &row.source {
            RowSource::Table { row: src, score } => {
                let cells: Vec<String> = row.cells.iter().map(|c| c.join(" ")).collect();
                emit(&mut w, format!(
                    "  snapshot row {r} <- table row {src} (overlap {}/{}): {}",
                    score.matched,
                    score.total,
                    cells.join(" | ")
                ))?;
            }
            RowSource::Synthetic { donors, scores } => {
                emit(&mut w, format!("  snapshot row {r} is synthetic; per-column donors:"))?;
                for (j, (donor, score)) in donors.iter().zip(scores).enumerate() {
                    emit(&mut w, format!(
                        "    column {j} ({}) <- table row {donor} (overlap {}/{}): {}",
                        table.columns[j].name.join(" "),
                        score.matched,
                        score.total,
                        row.cells[j].join(" ")
                    ))?;
                }
            }
        }
    }
    emit(&mut w, String::new())?;

    let ei = build_input_from_snapshot(&utterance, &snapshot, &table.columns, template, &v, max_seq_len)
        .map_err(runtime)?;
    for (r, row) in ei.rows.iter().enumerate() {
        let tokens: Vec<&str> = row.ids.iter().map(|&id| v.token(id)).collect();
        let tags: Vec<String> = row.tags.iter().map(|t| t.to_string()).collect();
        emit(&mut w, format!("row {r} linearization ({template}, {} tokens):", row.len()))?;
        emit(&mut w, format!("  tokens: {}", tokens.join(" ")))?;
        emit(&mut w, format!("  tags:   {}", tags.join(" ")))?;
    }
    emit(&mut w, String::new())?;

    let plan = make_mask_plan(ei.utt_len(), table.columns.len(), &snapshot, &v, cvr_positions, seed)
        .map_err(runtime)?;
    emit(&mut w, format!("sample mask plan (seed {seed}):"))?;
    let utt_tokens = &ei.utterance;
    for m in &plan.utterance {
        emit(&mut w, format!(
            "  utterance sub-token {} ({}) -> {:?}",
            m.position,
            v.token(utt_tokens.ids[m.position]),
            m.action
        ))?;
    }
    let col_names: Vec<String> = plan
        .columns
        .iter()
        .map(|&j| format!("{j} ({})", table.columns[j].name.join(" ")))
        .collect();
    emit(&mut w, format!("  masked columns: {}", col_names.join(", ")))?;
    emit(&mut w, format!("  cell value recovery targets: {}", plan.cvr_targets.len()))?;
    for t in &plan.cvr_targets {
        emit(&mut w, format!(
            "    column {}, snapshot row {}, value position {} -> {}",
            t.column,
            t.snapshot_row,
            t.position,
            v.token(t.token_id)
        ))?;
    }
    w.flush().map_err(|e| runtime(e.into()))?;
    Ok(())
}
