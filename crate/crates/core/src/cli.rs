//! Command-line entry point: resolves a configuration, runs one subcommand,
//! and writes its artifacts plus a manifest into the output directory.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

use crate::analysis::info::{alignment_gap_experiment_with_limit, format_info_gap, DEFAULT_TUPLE_LIMIT};
use crate::analysis::retrieval::{format_retrieval, retrieval_report};
use crate::error::{Error, Result};
use crate::harness::config::{Arrangement, ExperimentConfig};
use crate::harness::optim::AdamConfig;
use crate::harness::protocol::{format_record, format_report, run_arrangement, run_protocol, write_rows, ResultRow};
use crate::harness::train::{evaluate, source_data, target_data};
use crate::inference::{finetune_translators, EvalMode, FinetuneSettings, MissingMask};
use crate::losses::Toggles;
use crate::model::{deserialize, serialize, ModelState};
use crate::synthgen::{build_info_gap_joint, random_joint, write_dump, Generator, StreamKind, SynthRng};

pub const MANIFEST: &str = "manifest.txt";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const REPORT: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "simmmdg", version, about = "Multi-modal domain generalization on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FillArg {
    Zero,
    Translate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file with dotted keys (tables are flattened).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable. Applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Sets both the run seed and the data seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: ProfileArg,
    #[arg(long, value_name = "DIR", default_value = "simmmdg-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train on the first arrangement (or the configured sources) and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint, or without one run the whole protocol.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated modality names absent at test time.
        #[arg(long, value_name = "LIST")]
        missing: Option<String>,
        #[arg(long, value_enum)]
        fill: Option<FillArg>,
    },
    /// Missing-modality evaluation with zero filling and translation filling.
    Missing {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated modality names; default is every proper subset.
        #[arg(long, value_name = "LIST")]
        missing: Option<String>,
        /// Default emits both fills.
        #[arg(long, value_enum)]
        fill: Option<FillArg>,
    },
    /// Run the protocol for each of the seven module combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Cross-modal retrieval with shared and specific banks on the target data.
    Retrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Two modality names, e.g. `video,audio`; default first and last.
        #[arg(long, value_name = "A,B")]
        pair: Option<String>,
    },
    /// Information-gap experiment on discrete joints.
    Infogap {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        high_bits: f64,
        #[arg(long, default_value_t = 0.0)]
        low_bits: f64,
        /// Also evaluate this many random joints over binary modalities and labels.
        #[arg(long, default_value_t = 0)]
        random: usize,
        #[arg(long, default_value_t = DEFAULT_TUPLE_LIMIT)]
        limit: usize,
    },
    /// Write generated samples of one domain as text.
    DumpData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        domain: usize,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Defaults to the configured per-domain count.
        #[arg(long)]
        n: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Missing { .. } => "missing",
            Command::Ablate { .. } => "ablate",
            Command::Retrieval { .. } => "retrieval",
            Command::Infogap { .. } => "infogap",
            Command::DumpData { .. } => "dump-data",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Eval { common, .. }
            | Command::Missing { common, .. }
            | Command::Ablate { common }
            | Command::Retrieval { common, .. }
            | Command::Infogap { common, .. }
            | Command::DumpData { common, .. } => common,
        }
    }
}

/// Profile, then config file, then overrides, then `--seed`; validated last.
/// A file with a `[config]` table (such as a manifest) contributes only that table.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match common.profile {
        ProfileArg::Desk => ExperimentConfig::desk(),
        ProfileArg::Paper => ExperimentConfig::paper(),
    };
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(toml::Value::Table(inner)) = table.remove("config") {
            table = inner;
        }
        cfg.apply_toml(&table.to_string())?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.generator.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct RunContext {
    cfg: ExperimentConfig,
    out: PathBuf,
    artifacts: Vec<(&'static str, PathBuf)>,
}

impl RunContext {
    fn path(&mut self, kind: &'static str, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push((kind, p.clone()));
        p
    }

    fn write_text(&mut self, kind: &'static str, name: &str, text: &str) -> Result<()> {
        let p = self.path(kind, name);
        fs::write(p, text)?;
        Ok(())
    }

    fn write_rows(&mut self, rows: &[ResultRow]) -> Result<()> {
        let p = self.path("metrics", METRICS);
        write_rows(BufWriter::new(fs::File::create(p)?), rows)
    }

    fn write_csv(&mut self, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let p = self.path("metrics", METRICS);
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The arrangement that single-model subcommands train on.
fn primary_arrangement(cfg: &ExperimentConfig) -> Result<Arrangement> {
    cfg.arrangements()?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("no arrangement to run".into()))
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    deserialize(&bytes, &cfg.model_dims(), &cfg.toggles)
}

fn state_for(ctx: &mut RunContext, checkpoint: Option<&Path>, arr: &Arrangement) -> Result<ModelState> {
    match checkpoint {
        Some(p) => load_checkpoint(&ctx.cfg, p),
        None => {
            let (state, record, _) = run_arrangement(&ctx.cfg, arr, &[])?;
            let text = format_record(&ctx.cfg, &record);
            ctx.write_text("report", REPORT, &text)?;
            Ok(state)
        }
    }
}

fn finetune_settings(cfg: &ExperimentConfig) -> FinetuneSettings {
    FinetuneSettings {
        epochs: cfg.finetune_epochs,
        batch_size: cfg.batch_size,
        optimizer: AdamConfig {
            learning_rate: cfg.finetune_learning_rate,
            ..cfg.optimizer
        },
        seed: cfg.seed,
    }
}

fn all_masks(m: usize) -> Vec<MissingMask> {
    (1..(1usize << m) - 1)
        .map(|bits| MissingMask::new((0..m).filter(|k| bits >> k & 1 == 1), m).expect("proper subset"))
        .collect()
}

fn fill_modes(mask: &MissingMask, fill: Option<FillArg>) -> Vec<EvalMode> {
    match fill {
        Some(FillArg::Zero) => vec![EvalMode::ZeroFill(mask.clone())],
        Some(FillArg::Translate) => vec![EvalMode::Translated(mask.clone())],
        None => vec![EvalMode::ZeroFill(mask.clone()), EvalMode::Translated(mask.clone())],
    }
}

fn mode_label(mode: &EvalMode, names: &[String]) -> String {
    match mode {
        EvalMode::Full => "full".into(),
        EvalMode::ZeroFill(m) | EvalMode::Translated(m) => format!("{mode}:{}", m.names(names)),
    }
}

fn cmd_train(ctx: &mut RunContext) -> Result<()> {
    let arr = primary_arrangement(&ctx.cfg)?;
    let (state, record, rows) = run_arrangement(&ctx.cfg, &arr, &[EvalMode::Full])?;
    let ckpt = ctx.path("checkpoint", CHECKPOINT);
    fs::write(ckpt, serialize(&state))?;
    ctx.write_rows(&rows)?;
    let text = format_record(&ctx.cfg, &record);
    ctx.write_text("report", REPORT, &text)
}

fn cmd_eval(ctx: &mut RunContext, checkpoint: Option<&Path>, missing: Option<&str>, fill: Option<FillArg>) -> Result<()> {
    let names = ctx.cfg.modality_names.clone();
    let mode = match missing {
        None => EvalMode::Full,
        Some(list) => {
            let mask = MissingMask::parse(list, &names)?;
            match fill.unwrap_or(FillArg::Zero) {
                FillArg::Zero => EvalMode::ZeroFill(mask),
                FillArg::Translate => EvalMode::Translated(mask),
            }
        }
    };
    let Some(path) = checkpoint else {
        if mode != EvalMode::Full {
            return Err(Error::Config("--missing with eval needs --checkpoint; use `missing` instead".into()));
        }
        let report = run_protocol(&ctx.cfg)?;
        let mut rows = report.rows();
        rows.push(ResultRow {
            arrangement: "mean".into(),
            mode: "full".into(),
            top1: report.mean_top1(),
        });
        ctx.write_rows(&rows)?;
        let text = format_report(&ctx.cfg, &report);
        return ctx.write_text("report", REPORT, &text);
    };
    let state = load_checkpoint(&ctx.cfg, path)?;
    let arr = primary_arrangement(&ctx.cfg)?;
    let gen = Generator::new(ctx.cfg.generator.clone())?;
    let mut rows = Vec::new();
    for &t in &arr.targets {
        let test = target_data(&ctx.cfg, &gen, t)?;
        rows.push(ResultRow {
            arrangement: arr.label(t),
            mode: mode_label(&mode, &names),
            top1: evaluate(&state, &test, &mode)?,
        });
    }
    ctx.write_rows(&rows)
}

fn cmd_missing(ctx: &mut RunContext, checkpoint: Option<&Path>, missing: Option<&str>, fill: Option<FillArg>) -> Result<()> {
    let names = ctx.cfg.modality_names.clone();
    let m = names.len();
    let masks = match missing {
        Some(list) => vec![MissingMask::parse(list, &names)?],
        None => all_masks(m),
    };
    let arr = primary_arrangement(&ctx.cfg)?;
    let state = state_for(ctx, checkpoint, &arr)?;
    let gen = Generator::new(ctx.cfg.generator.clone())?;
    let wants_translate = fill != Some(FillArg::Zero);
    let (tuned, curve) = if wants_translate && ctx.cfg.finetune_epochs > 0 {
        let data = source_data(&ctx.cfg, &gen, &arr.sources)?;
        finetune_translators(&state, &data.train, &finetune_settings(&ctx.cfg))?
    } else {
        (state.clone(), Vec::new())
    };
    let mut rows = Vec::new();
    for &t in &arr.targets {
        let test = target_data(&ctx.cfg, &gen, t)?;
        rows.push(ResultRow {
            arrangement: arr.label(t),
            mode: "full".into(),
            top1: evaluate(&state, &test, &EvalMode::Full)?,
        });
        for mask in &masks {
            for mode in fill_modes(mask, fill) {
                let s = if matches!(mode, EvalMode::Translated(_)) { &tuned } else { &state };
                rows.push(ResultRow {
                    arrangement: arr.label(t),
                    mode: mode_label(&mode, &names),
                    top1: evaluate(s, &test, &mode)?,
                });
            }
        }
    }
    ctx.write_rows(&rows)?;
    if !curve.is_empty() {
        let text: Vec<String> = curve.iter().map(|v| format!("{v:.6}")).collect();
        ctx.write_text("report", "finetune.txt", &format!("translation_loss = [{}]\n", text.join(", ")))?;
    }
    Ok(())
}

fn cmd_ablate(ctx: &mut RunContext) -> Result<()> {
    let mut rows = Vec::new();
    let mut text = String::new();
    for toggles in Toggles::ablation_rows() {
        let mut cfg = ctx.cfg.clone();
        cfg.toggles = toggles;
        let report = run_protocol(&cfg)?;
        for mut r in report.rows() {
            r.mode = toggles.to_string();
            rows.push(r);
        }
        rows.push(ResultRow {
            arrangement: "mean".into(),
            mode: toggles.to_string(),
            top1: report.mean_top1(),
        });
        text.push_str(&format_report(&cfg, &report));
        text.push('\n');
    }
    ctx.write_rows(&rows)?;
    ctx.write_text("report", REPORT, &text)
}

fn cmd_retrieval(ctx: &mut RunContext, checkpoint: Option<&Path>, pair: Option<&str>) -> Result<()> {
    let names = ctx.cfg.modality_names.clone();
    let (a, b) = match pair {
        None => (0, names.len() - 1),
        Some(p) => {
            let idx: Vec<usize> = p
                .split(',')
                .map(|n| {
                    names.iter().position(|x| x == n.trim()).ok_or_else(|| {
                        Error::Config(format!("unknown modality `{n}`; known: {}", names.join(", ")))
                    })
                })
                .collect::<Result<_>>()?;
            match idx[..] {
                [a, b] if a != b => (a, b),
                _ => return Err(Error::Config("--pair needs two distinct modality names".into())),
            }
        }
    };
    let arr = primary_arrangement(&ctx.cfg)?;
    let state = state_for(ctx, checkpoint, &arr)?;
    let gen = Generator::new(ctx.cfg.generator.clone())?;
    let mut csv_rows = Vec::new();
    let mut text = String::new();
    for &t in &arr.targets {
        let test = target_data(&ctx.cfg, &gen, t)?;
        let rows = retrieval_report(&state, &test, a, b)?;
        text += &format!("[retrieval {}]\n{}\n", arr.label(t), format_retrieval(&rows, &names));
        for r in rows {
            csv_rows.push(vec![
                arr.label(t),
                names[r.query_modality].clone(),
                names[r.gallery_modality].clone(),
                r.part.to_string(),
                r.k.to_string(),
                format!("{:?}", r.recall),
            ]);
        }
    }
    ctx.write_csv(&["arrangement", "query", "gallery", "part", "k", "recall"], &csv_rows)?;
    let name = if checkpoint.is_some() { REPORT } else { "retrieval.txt" };
    ctx.write_text("report", name, &text)
}

fn cmd_infogap(ctx: &mut RunContext, high: f64, low: f64, random: usize, limit: usize) -> Result<()> {
    let mut joints = vec![("constructed".to_string(), build_info_gap_joint(high, low)?)];
    let mut rng = SynthRng::seed_from_u64(ctx.cfg.seed);
    for i in 0..random {
        joints.push((format!("random-{i}"), random_joint(&mut rng, &[2, 2], 2)?));
    }
    let mut rows = Vec::new();
    let mut text = String::new();
    for (name, joint) in &joints {
        let r = alignment_gap_experiment_with_limit(joint, limit)?;
        text += &format!("[joint {name}]\n{}bound_holds = {}\n\n", format_info_gap(&r), r.satisfies_bound(1e-9));
        let mut row = vec![name.clone()];
        row.extend(r.mi_per_modality.iter().map(|v| format!("{v:?}")));
        row.extend([r.delta_p, r.aligned_optimal_ce, r.unconstrained_optimal_ce, r.gap].map(|v| format!("{v:?}")));
        rows.push(row);
    }
    ctx.write_csv(
        &["joint", "mi_x1", "mi_x2", "delta_p", "aligned_ce", "unconstrained_ce", "gap"],
        &rows,
    )?;
    ctx.write_text("report", REPORT, &text)
}

fn cmd_dump(ctx: &mut RunContext, domain: usize, split: SplitArg, n: Option<usize>) -> Result<()> {
    let gen = Generator::new(ctx.cfg.generator.clone())?;
    let (kind, default_n, label) = match split {
        SplitArg::Train => (StreamKind::Train, ctx.cfg.train_per_domain, "train"),
        SplitArg::Test => (StreamKind::Test, ctx.cfg.test_per_domain, "test"),
    };
    let n = n.unwrap_or(default_n);
    let samples = gen.sample_stream(domain, n, kind)?;
    let p = ctx.path("dataset", "dataset.txt");
    let mut w = BufWriter::new(fs::File::create(p)?);
    write_dump(&mut w, &ctx.cfg.generator, &samples)?;
    let mut counts = vec![0usize; ctx.cfg.generator.num_classes];
    for s in &samples {
        counts[s.label] += 1;
    }
    let rows: Vec<Vec<String>> = counts
        .iter()
        .enumerate()
        .map(|(c, k)| vec![domain.to_string(), label.to_string(), c.to_string(), k.to_string()])
        .collect();
    ctx.write_csv(&["domain", "split", "label", "count"], &rows)
}

fn write_manifest(ctx: &RunContext, cmd: &Command, seconds: f64) -> Result<()> {
    let quote = |s: &str| toml::Value::String(s.to_string()).to_string();
    let mut s = String::from("# simmmdg run manifest\n");
    s += &format!("tool_version = {}\n", quote(env!("CARGO_PKG_VERSION")));
    s += &format!("subcommand = {}\n", quote(cmd.name()));
    s += &format!("arguments = {}\n", quote(&format!("{cmd:?}")));
    s += &format!("seed = {}\n", ctx.cfg.seed);
    s += &format!("wall_clock_seconds = {seconds:.3}\n\n[artifacts]\n");
    for (kind, p) in &ctx.artifacts {
        s += &format!("{kind}.{} = {}\n", p.file_name().and_then(|f| f.to_str()).unwrap_or("?").replace('.', "_"), quote(&p.display().to_string()));
    }
    s += "\n[config]\n";
    s += &ctx.cfg.echo();
    fs::write(ctx.out.join(MANIFEST), s)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let common = cli.command.common();
    let cfg = resolve_config(common)?;
    fs::create_dir_all(&common.out)?;
    let mut ctx = RunContext {
        cfg,
        out: common.out.clone(),
        artifacts: Vec::new(),
    };
    match &cli.command {
        Command::Train { .. } => cmd_train(&mut ctx)?,
        Command::Eval { checkpoint, missing, fill, .. } => {
            cmd_eval(&mut ctx, checkpoint.as_deref(), missing.as_deref(), *fill)?
        }
        Command::Missing { checkpoint, missing, fill, .. } => {
            cmd_missing(&mut ctx, checkpoint.as_deref(), missing.as_deref(), *fill)?
        }
        Command::Ablate { .. } => cmd_ablate(&mut ctx)?,
        Command::Retrieval { checkpoint, pair, .. } => cmd_retrieval(&mut ctx, checkpoint.as_deref(), pair.as_deref())?,
        Command::Infogap { high_bits, low_bits, random, limit, .. } => {
            cmd_infogap(&mut ctx, *high_bits, *low_bits, *random, *limit)?
        }
        Command::DumpData { domain, split, n, .. } => cmd_dump(&mut ctx, *domain, *split, *n)?,
    }
    write_manifest(&ctx, &cli.command, start.elapsed().as_secs_f64())
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
