mod config;
mod error;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use relgate::rdb::{canonical_form, load_bundle_unchecked, validate_fd, Split};
use relgate::schemagraph::gsl::{demo_add_counterexample, demo_prune_counterexample, enumerate_pruning_maps};
use relgate::schemagraph::{enumerate_edge_triples, Role, RoleAssignment, DEFAULT_PATH_CAP};
use relgate::{
    build_schema_graph, construct_reg, ingest_bundle, invert_reg, load_checkpoint, load_task, read_gate_file, SynthSpec,
    Trainer, Workspace,
};
use serde_json::{Map, Value};

use config::{Roles, TrainFlags};
use error::CliError;
use report::{RunReport, Status};

#[derive(Debug, Parser)]
#[command(name = "relgate", version, about = "Relational databases as graphs with learned table roles")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, env = "RELGATE_SEED")]
    seed: Option<u64>,
    /// Also write the JSON run report to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest a bundle and list dangling foreign keys.
    Validate { bundle: PathBuf },
    /// Build the entity graph, invert it and compare with the input.
    Roundtrip {
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "learn")]
        roles: Roles,
    },
    /// Show that pruning or adding edges can merge distinct graphs.
    DemoGsl,
    /// Write a synthetic bundle.
    Synth {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SynthSpec::NAMES))]
        generator: String,
        /// Generator parameter as key=value; repeatable.
        #[arg(long = "param", short = 'p', value_name = "KEY=VALUE")]
        params: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train on a task and write a checkpoint directory.
    Train {
        bundle: PathBuf,
        /// Directory holding task.json and the label files.
        task: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(short, long, default_value = "relgate-run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        checkpoint: PathBuf,
        bundle: PathBuf,
        task: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write the per-triple role report of a checkpoint.
    ExportStructure {
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Roundtrip { .. } => "roundtrip",
            Command::DemoGsl => "demo-gsl",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::ExportStructure { .. } => "export-structure",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let mut r = RunReport::new(&std::env::args().nth(1).unwrap_or_default(), 0);
            r.status = Status::Error;
            r.exit_code = 2;
            r.error = Some(e.kind().to_string());
            let _ = r.emit(None);
            return ExitCode::from(2);
        }
    };
    let start = Instant::now();
    let mut report = RunReport::new(cli.command.name(), cli.seed.unwrap_or(0));
    let result = run(&cli, &mut report);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Err(e) = &result {
        eprintln!("error: {e}");
        report.status = Status::Error;
        report.exit_code = e.exit_code();
        report.error = Some(e.to_string());
    }
    if let Err(e) = report.emit(cli.report.as_deref()) {
        eprintln!("error: cannot write report: {e}");
        return ExitCode::from(1);
    }
    ExitCode::from(report.exit_code)
}

fn run(cli: &Cli, report: &mut RunReport) -> Result<(), CliError> {
    match &cli.command {
        Command::Validate { bundle } => validate(bundle, report),
        Command::Roundtrip { bundle, roles } => roundtrip(bundle, *roles, report),
        Command::DemoGsl => demo_gsl(report),
        Command::Synth { generator, params, out } => synth(generator, params, cli.seed, out, report),
        Command::Train { bundle, task, flags, out } => train(bundle, task, flags, cli.seed, out, report),
        Command::Eval { checkpoint, bundle, task, split } => eval(checkpoint, bundle, task, (*split).into(), report),
        Command::ExportStructure { checkpoint, out } => export_structure(checkpoint, out, report),
    }
}

fn validate(bundle: &Path, report: &mut RunReport) -> Result<(), CliError> {
    let db = load_bundle_unchecked(bundle)?;
    report.digest(&db);
    let violations = validate_fd(&db);
    report.metric("tables", db.table_names().count());
    report.metric("rows", db.total_rows());
    report.metric("violations", violations.len());
    report.metric("reports", &violations);
    for v in &violations {
        eprintln!("{}[{}].{} = {} has no match in {}", v.table, v.row, v.column, v.value, v.references);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::InvalidBundle(format!("{} dangling foreign keys", violations.len())))
    }
}

fn roundtrip(bundle: &Path, roles: Roles, report: &mut RunReport) -> Result<(), CliError> {
    let db = ingest_bundle(bundle)?;
    report.digest(&db);
    let sg = build_schema_graph(&db);
    let triples = enumerate_edge_triples(&sg);
    let assignment = match roles {
        Roles::Learn => RoleAssignment::uniform(&sg, &triples, Role::Learn),
        Roles::AllNode => RoleAssignment::uniform(&sg, &triples, Role::Node),
        Roles::AllEdge => RoleAssignment::uniform(&sg, &triples, Role::Edge),
        Roles::Random => RoleAssignment::random(&sg, &triples, report.seed),
    };
    report.config = serde_json::json!({ "roles": roles.to_possible_value().map(|v| v.get_name().to_string()), "path_cap": DEFAULT_PATH_CAP });
    let reg = construct_reg(&db, &assignment, DEFAULT_PATH_CAP)?;
    let back = invert_reg(&reg)?;
    let pass = canonical_form(&back) == canonical_form(&db);
    let verdict = if pass { "PASS" } else { "FAIL" };
    info!("{} triples, {} path relations", triples.len(), reg.paths.len());
    eprintln!("{verdict}");
    report.metric("verdict", verdict);
    report.metric("triples", triples.len());
    report.metric("path_relations", reg.paths.len());
    report.metric("node_tables", reg.nodes.keys().collect::<Vec<_>>());
    report.metric("edge_tables", reg.edges.keys().collect::<Vec<_>>());
    if pass {
        Ok(())
    } else {
        Err(CliError::RoundtripFail)
    }
}

fn demo_gsl(report: &mut RunReport) -> Result<(), CliError> {
    let demos = [demo_prune_counterexample(), demo_add_counterexample()];
    for d in &demos {
        eprintln!("rule: {}", d.rule);
        eprintln!("  input 1:  {:?}", d.input_1.edges);
        eprintln!("  input 2:  {:?}", d.input_2.edges);
        eprintln!("  output 1: {:?}", d.output_1.edges);
        eprintln!("  output 2: {:?}", d.output_2.edges);
        eprintln!("  outputs collide: {}", d.collision);
    }
    let enumeration = enumerate_pruning_maps(3);
    eprintln!(
        "{} of {} pruning maps on 3 nodes merge two graphs",
        enumeration.maps_with_collision, enumeration.maps
    );
    report.metric("demos", &demos);
    report.metric("pruning_maps", &enumeration);
    Ok(())
}

fn synth(generator: &str, params: &[String], seed: Option<u64>, out: &Path, report: &mut RunReport) -> Result<(), CliError> {
    let mut spec = Map::new();
    spec.insert("generator".into(), Value::String(generator.into()));
    for p in params {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("parameter {p:?} is not key=value")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.into()));
        spec.insert(k.into(), v);
    }
    if let Some(s) = seed {
        spec.insert("seed".into(), s.into());
    }
    let spec: SynthSpec =
        serde_json::from_value(Value::Object(spec)).map_err(|e| CliError::Usage(format!("generator parameters: {e}")))?;
    let generated = spec.generate()?;
    generated.write(out)?;
    let config = serde_json::to_value(&spec)?;
    report.seed = config["seed"].as_u64().unwrap_or(report.seed);
    report.config = config;
    report.digest(&generated.db);
    report.metric("tables", generated.db.table_names().count());
    report.metric("rows", generated.db.total_rows());
    report.metric("task", generated.task.as_ref().map(|t| &t.name));
    report.metric("out", out);
    Ok(())
}

fn train(
    bundle: &Path,
    task_dir: &Path,
    flags: &TrainFlags,
    seed: Option<u64>,
    out: &Path,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let cfg = flags.resolve(seed)?;
    report.seed = cfg.train.seed;
    report.config = serde_json::to_value(&cfg)?;
    let db = ingest_bundle(bundle)?;
    report.digest(&db);
    let task = load_task(task_dir, &db)?;
    let ws = Workspace::new(&db, &task, cfg.train.roles, cfg.train.path_cap, None)?;
    let mut trainer = Trainer::new(&task, &ws, cfg.model.clone(), cfg.train.clone())?;
    if let Some(src) = &flags.transfer_from {
        let gates = read_gate_file(src)?;
        trainer.transfer(&gates)?;
    }
    info!("training {} on {} records", task.name, task.train.len());
    let outcome = trainer.fit()?;
    trainer.save(out, Some(&outcome))?;
    report.metric("task", &outcome.task);
    report.metric("transferred_from", &outcome.transferred_from);
    report.metric("metric", outcome.metric);
    report.metric("val", outcome.val);
    report.metric("test", outcome.test.value);
    report.metric("best_epoch", outcome.best_epoch);
    report.metric("epochs_run", outcome.history.len());
    report.metric("checkpoint", out);
    report.structure = Some(out.join("structure.json").display().to_string());
    Ok(())
}

fn eval(ckpt_dir: &Path, bundle: &Path, task_dir: &Path, split: Split, report: &mut RunReport) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    report.seed = ckpt.meta.train.seed;
    report.config = serde_json::json!({ "model": ckpt.meta.model, "train": ckpt.meta.train, "split": split });
    let db = ingest_bundle(bundle)?;
    report.digest(&db);
    let task = load_task(task_dir, &db)?;
    ckpt.check_compatible(&db, &task)?;
    let train = &ckpt.meta.train;
    let ws = Workspace::new(&db, &task, train.roles, train.path_cap, Some(ckpt.meta.stats.clone()))?;
    let trainer = Trainer::from_checkpoint(&ckpt, &task, &ws)?;
    let e = trainer.evaluate(split)?;
    report.metric("task", &task.name);
    report.metric("split", split);
    report.metric("metric", e.metric);
    report.metric("value", e.value);
    report.metric("records", e.records);
    Ok(())
}

fn export_structure(ckpt_dir: &Path, out: &Path, report: &mut RunReport) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    report.seed = ckpt.meta.train.seed;
    let structure = ckpt.structure()?;
    std::fs::write(out, serde_json::to_string_pretty(&structure)? + "\n")?;
    report.metric("task", &structure.task);
    report.metric("triples", structure.entries.len());
    report.structure = Some(out.display().to_string());
    Ok(())
}
