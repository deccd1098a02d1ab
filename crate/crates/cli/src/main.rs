//! `asu` command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use asu::config::{apply_override, Mode, RunConfig, SEED_ENV};
use asu::model::Ablation;
use asu::region_encoder::RegionSplit;
use asu::semantic_query::{attention_records, to_json_lines};
use asu::su_bank::{build_bank, load_categories, BankOptions, Lexicon};
use asu::tensor::Tensor;
use asu::text_embed::{EmbeddingMatrix, ExportManifest};
use asu::train::checkpoint::Checkpoint;
use asu::train::data::synthetic_categories;
use asu::train::metrics_json;
use asu::train::protocol::{run, Prepared};
use asu::Tape;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA_WARNING: u8 = 2;

#[derive(Parser)]
#[command(name = "asu", version, about = "Semantic-unit video action recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a semantic bank from action labels (one per line).
    Bank(BankArgs),
    /// Write the synthetic dataset index, its bank and text export manifests.
    GenData(GenDataArgs),
    /// Train per config; writes metrics.json and checkpoint.asuckpt.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Dump per-frame, per-slot top semantic units of one video.
    Inspect(InspectArgs),
    /// Run the region-split grid and the component-switch grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let env = env_seed();
        match &self.config {
            Some(p) => Ok(RunConfig::load(p, &self.overrides, env.as_deref())?),
            None => Ok(RunConfig::from_value_with(json!({}), &self.overrides, env.as_deref())?),
        }
    }
}

#[derive(Args)]
struct BankArgs {
    #[arg(long)]
    labels: PathBuf,
    /// JSON object of term → description.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// JSON object of term → category; the synthetic vocabulary's map when omitted.
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long)]
    no_body_preset: bool,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the rejection report; standard error when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write every rendered frame as an embedding file (rows `id/t`).
    #[arg(long)]
    frames: bool,
    /// Encoder identifier recorded in the export manifests.
    #[arg(long, default_value = "clip-vit-b16")]
    encoder: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Replaces the config stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    views: Option<usize>,
    /// Metrics file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: String,
    #[arg(long, default_value_t = 3)]
    top: usize,
    /// Rescale the listed weights to sum to 1.
    #[arg(long)]
    renormalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// `split`, `flags` or `both`.
    #[arg(long, default_value = "both")]
    grid: String,
}

enum Outcome {
    Ok,
    DataWarning,
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn cmd_bank(a: &BankArgs) -> Result<Outcome> {
    let text = fs::read_to_string(&a.labels).with_context(|| format!("reading {}", a.labels.display()))?;
    let labels: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
    if labels.is_empty() {
        bail!("{} contains no labels", a.labels.display());
    }
    let lexicon = match &a.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::new(),
    };
    let categories = match &a.categories {
        Some(p) => load_categories(p)?,
        None => synthetic_categories(),
    };
    let options = BankOptions {
        include_body_preset: !a.no_body_preset,
        ..BankOptions::default()
    };
    let build = build_bank(&labels, &lexicon, &categories, &options)?;
    build.bank.save(&a.out)?;
    let report = build.rejection_report();
    match &a.report {
        Some(p) => write(p, &report)?,
        None => eprint!("{report}"),
    }
    if build.rejected.is_empty() {
        Ok(Outcome::Ok)
    } else {
        eprintln!("{} candidate(s) rejected", build.rejected.len());
        Ok(Outcome::DataWarning)
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let cfg = a.config.load()?;
    let prep = Prepared::new(&cfg)?;
    let ds = &prep.dataset;
    let split = |i: usize| if ds.train.contains(&i) { "train" } else { "val" };
    let index = json!({
        "seed": cfg.seed,
        "spec": ds.spec,
        "classes": ds.classes,
        "videos": ds.videos.iter().enumerate().map(|(i, v)| json!({
            "id": v.id,
            "class": v.class,
            "split": split(i),
        })).collect::<Vec<_>>(),
    });
    write(&a.out.join("dataset.json"), pretty(&index)?)?;
    write(&a.out.join("labels.txt"), ds.labels().join("\n") + "\n")?;
    prep.bank.save(&a.out.join("bank.json"))?;
    let d = cfg.encoder.shared_dim;
    write(&a.out.join("units.manifest.json"), pretty(&ExportManifest::for_bank(&prep.bank, &a.encoder, d))?)?;
    let labels = ExportManifest::for_labels(&ds.labels(), &cfg.text.prompt, &a.encoder, d)?;
    write(&a.out.join("labels.manifest.json"), pretty(&labels)?)?;
    if a.frames {
        let mut names = Vec::new();
        let mut data = Vec::new();
        for v in &ds.videos {
            let per = v.frames.numel() / ds.spec.source_frames;
            for t in 0..ds.spec.source_frames {
                names.push(format!("{}/{t}", v.id));
                data.extend_from_slice(&v.frames.data()[t * per..(t + 1) * per]);
            }
        }
        let cols = data.len() / names.len();
        let m = EmbeddingMatrix::new(names, Tensor::new(&[data.len() / cols, cols], data)?)?;
        m.save(&a.out.join("frames.asuemb"))?;
    }
    Ok(Outcome::Ok)
}

fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let cfg = a.config.load()?;
    let stdout = std::io::stdout();
    let out = run(&cfg, false, |e| {
        let mut lock = stdout.lock();
        // Progress is best effort; a closed pipe must not abort training.
        let _ = writeln!(lock, "{}", serde_json::to_string(e).unwrap_or_default());
        let _ = lock.flush();
    })?;
    write(&a.out.join("metrics.json"), metrics_json(&out.metrics)?)?;
    out.checkpoint.save(&a.out.join("checkpoint.asuckpt"))?;
    Ok(Outcome::Ok)
}

/// Config for evaluating `ck`: its stored config or `config_path`, then
/// overrides, the seed variable, and the mode and views switches.
fn eval_config(ck: &Checkpoint, a: &EvalArgs) -> Result<RunConfig> {
    let mut value = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ck.config.clone(),
    };
    if let Some(m) = &a.mode {
        let mode: Mode = m.parse()?;
        apply_override(&mut value, &format!("protocol.mode=\"{}\"", mode.as_str()))?;
    }
    if let Some(v) = a.views {
        apply_override(&mut value, &format!("protocol.views={v}"))?;
    }
    let mut cfg = RunConfig::from_value_with(value, &a.overrides, env_seed().as_deref())?;
    if let Some(p) = &a.config {
        cfg.resolve_paths(p.parent().unwrap_or(Path::new(".")));
    }
    let trained = RunConfig::from_value(ck.config.clone())?;
    let (was, now) = (trained.protocol.mode, cfg.protocol.mode);
    if was != now && (was == Mode::Zeroshot || now == Mode::Zeroshot) {
        bail!(
            "checkpoint was trained in {} mode and cannot be evaluated in {} mode",
            was.as_str(),
            now.as_str()
        );
    }
    if now == Mode::Zeroshot && (trained.seed, trained.protocol.holdout) != (cfg.seed, cfg.protocol.holdout) {
        bail!("zero-shot evaluation must use the seed and holdout the checkpoint was trained with");
    }
    Ok(cfg)
}

/// Run setup whose frozen text matrices come from the checkpoint when it has them.
fn prepared_for(ck: &Checkpoint, cfg: &RunConfig) -> Result<Prepared> {
    let mut prep = Prepared::new(cfg)?;
    if let Some(u) = ck.frozen("units") {
        prep.units = u.select(&prep.bank.composed_texts())?;
    }
    if let Some(l) = ck.frozen("labels") {
        prep.labels = l.select(&prep.dataset.labels())?;
    }
    Ok(prep)
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = eval_config(&ck, a)?;
    let prep = prepared_for(&ck, &cfg)?;
    let (model, store) = prep.restore(&ck)?;
    let metrics = prep.evaluate(&model, &store, cfg.protocol.views, Vec::new())?;
    let text = metrics_json(&metrics)?;
    match &a.out {
        Some(p) => write(p, text)?,
        None => print!("{text}"),
    }
    Ok(Outcome::Ok)
}

fn cmd_inspect(a: &InspectArgs) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = RunConfig::from_value(ck.config.clone())?;
    if let Some(s) = env_seed() {
        cfg = RunConfig::from_value_with(ck.config.clone(), &[], Some(&s))?;
    }
    let prep = prepared_for(&ck, &cfg)?;
    let (index, _) = prep
        .dataset
        .video(&a.video)
        .with_context(|| format!("unknown video id {:?}", a.video))?;
    let (model, store) = prep.restore(&ck)?;
    let sa = model
        .semantic
        .as_ref()
        .context("checkpoint has the semantic path switched off; there are no unit affinities")?;
    let clip = prep.dataset.clip(index, 1, 0)?;
    let frames = prep.dataset.spec.frames;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &store, &clip, 1, frames)?;
    let affinity = out.affinity.context("no affinities produced")?;
    // Rows of the unit matrix follow bank order.
    let names: Vec<String> = prep.bank.units().iter().map(|u| u.name.clone()).collect();
    if names.len() != sa.num_units() {
        bail!("bank has {} units, the model attends over {}", names.len(), sa.num_units());
    }
    let records = attention_records(&a.video, tape.value(affinity), out.slots, &names, a.top, a.renormalize)?;
    let text = to_json_lines(&records)?;
    match &a.out {
        Some(p) => write(p, text)?,
        None => print!("{text}"),
    }
    Ok(Outcome::Ok)
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Trains one ablation cell; failures become an `error` entry.
fn ablate_cell(base: &Value, overrides: &[String], out: &Path) -> Result<()> {
    let result = RunConfig::from_value_with(base.clone(), overrides, None)
        .map_err(anyhow::Error::from)
        .and_then(|cfg| Ok(run(&cfg, false, |_| {})?));
    let body = match result {
        Ok(r) => metrics_json(&r.metrics)?,
        Err(e) => pretty(&json!({ "error": e.to_string(), "overrides": overrides }))?,
    };
    write(out, body)?;
    println!("{}", json!({ "cell": out.file_name().and_then(|n| n.to_str()), "done": true }));
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<Outcome> {
    let (split, flags) = match a.grid.as_str() {
        "split" => (true, false),
        "flags" => (false, true),
        "both" => (true, true),
        other => bail!("unknown grid {other:?} (split, flags, both)"),
    };
    let base = a.config.load()?.to_value()?;
    if split {
        for s in RegionSplit::ablation_grid() {
            let name = match s {
                RegionSplit::None => "split-none.json".to_owned(),
                g => format!("split-{g}.json"),
            };
            ablate_cell(&base, &[format!("encoder.split=\"{s}\"")], &a.out.join(name))?;
        }
    }
    if flags {
        for ab in [
            Ablation::BASELINE,
            Ablation {
                region: true,
                ..Ablation::BASELINE
            },
            Ablation::SEMANTIC_ONLY,
            Ablation {
                temporal: false,
                ..Ablation::FULL
            },
            Ablation::FULL,
        ] {
            let (s, r, t) = (switch(ab.semantic), switch(ab.region), switch(ab.temporal));
            let overrides = [
                format!("ablation.semantic=\"{s}\""),
                format!("ablation.region=\"{r}\""),
                format!("ablation.temporal=\"{t}\""),
            ];
            let name = format!("flags-semantic_{s}-region_{r}-temporal_{t}.json");
            ablate_cell(&base, &overrides, &a.out.join(name))?;
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Bank(a) => cmd_bank(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::DataWarning) => ExitCode::from(EXIT_DATA_WARNING),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
