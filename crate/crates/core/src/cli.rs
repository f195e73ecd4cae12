//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::checkpoint::Checkpoint;
use crate::data::synth::write_synthetic;
use crate::data::{read_bundle, synth_generate, Dataset, Manifest, OutfitSample, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, export_interactions, interactions, level_scores, Metrics, RetrievalResult, ScoreConfig,
    ScoreMode,
};
use crate::interaction::Side;
use crate::train::{TrainConfig, Trainer};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING_FILE: i32 = 4;
pub const EXIT_FAILURE: i32 = 1;

const CHECKPOINT_FILE: &str = "checkpoint.json";
const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "stylematch", version, about = "Text-to-outfit retrieval over precomputed token embeddings")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted styles.
    Synth(SynthArgs),
    /// Train the retrieval head.
    Train(TrainArgs),
    /// Rank every outfit of a split for every description and report Recall@k.
    Eval(EvalArgs),
    /// Rank outfits for one description embedding record.
    Query(QueryArgs),
    /// Write item- and style-level token interactions of one pair.
    ExportInteractions(ExportArgs),
    /// Summarize a checkpoint file.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub outfits: Option<usize>,
    #[arg(long)]
    pub archetypes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub distractor_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset manifest, or a directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Fail on missing embedding records instead of skipping the outfit.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args, Default)]
pub struct ScoreArgs {
    /// item-t2o, item-full or combined.
    #[arg(long)]
    pub mode: Option<ScoreMode>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON file with training settings; overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings: paper or desk.
    #[arg(long, default_value = "paper")]
    pub preset: String,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    #[arg(long)]
    pub k_outfit: Option<f64>,
    #[arg(long)]
    pub k_text: Option<f64>,
    #[arg(long)]
    pub no_item: bool,
    #[arg(long)]
    pub no_style: bool,
    #[arg(long)]
    pub no_outfit: bool,
    /// Seed K-means randomly instead of greedily.
    #[arg(long)]
    pub no_greedy_init: bool,
    #[arg(long)]
    pub reproducible: bool,
    /// Pad the final short batch instead of dropping it.
    #[arg(long)]
    pub keep_last: bool,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint path [default: <data dir>/checkpoint.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log path [default: <data dir>/train_log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Split evaluated after training when present in the manifest.
    #[arg(long, default_value = "valid")]
    pub eval_split: Split,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint to score with [default: <data dir>/checkpoint.json].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON file with settings; only the scoring fields apply here.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub score: ScoreArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Per-query rankings [default: <data dir>/results_<split>.jsonl].
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Keep this many candidates per query in the results file.
    #[arg(long, default_value_t = 50)]
    pub keep: usize,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Embedding bundle holding the description tokens.
    #[arg(long)]
    pub text: PathBuf,
    /// Record id inside the bundle [default: the first record].
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Candidate outfit id.
    #[arg(long)]
    pub outfit: String,
    /// Outfit whose description is the query [default: --outfit].
    #[arg(long)]
    pub query: Option<String>,
    /// Output stem; writes <stem>.json, <stem>.item.csv and <stem>.style.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => EXIT_MISSING_FILE,
        Error::Config(_) | Error::Json { .. } => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` and runs the command, writing results to `out`.
pub fn run_from<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.json, out),
        Command::Train(a) => train(a, cli.json, out),
        Command::Eval(a) => eval(a, cli.json, out),
        Command::Query(a) => query(a, cli.json, out),
        Command::ExportInteractions(a) => export(a, cli.json, out),
        Command::InspectCheckpoint(a) => inspect(a, cli.json, out),
    }
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn emit_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json("<stdout>", e))?;
    emit(out, s)
}

fn read_json_object(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str::<Value>(&text).map_err(|e| Error::json(path, e))? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
    }
}

/// Applies the keys of a JSON config file on top of `base`.
fn overlay<T>(base: &T, file: Option<&Path>) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut value = serde_json::to_value(base).map_err(|e| Error::json("<config>", e))?;
    if let Some(path) = file {
        let obj = value.as_object_mut().expect("configs serialize to objects");
        obj.extend(read_json_object(path)?);
        return serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())));
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn synth(a: &SynthArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let mut cfg: SynthConfig = overlay(&SynthConfig::default(), a.config.as_deref())?;
    set(&mut cfg.outfits, a.outfits);
    set(&mut cfg.archetypes, a.archetypes);
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.sigma, a.sigma);
    set(&mut cfg.distractor_rate, a.distractor_rate);
    set(&mut cfg.seed, a.seed);
    let (data, planting) = synth_generate(&cfg)?;
    write_synthetic(&a.out, &data, &planting)?;
    let counts: Vec<(Split, usize)> = Split::ALL.iter().map(|&s| (s, data.split(s).len())).collect();
    if json {
        emit_json(
            out,
            &serde_json::json!({
                "out": a.out,
                "outfits": data.len(),
                "dim": data.dim,
                "splits": counts.iter().map(|(s, n)| (s.as_str(), n)).collect::<std::collections::BTreeMap<_, _>>(),
            }),
        )
    } else {
        let parts: Vec<String> = counts.iter().map(|(s, n)| format!("{s} {n}")).collect();
        emit(
            out,
            format!(
                "wrote {} synthetic outfits (D={}) to {}: {}",
                data.len(),
                data.dim,
                a.out.display(),
                parts.join(", ")
            ),
        )
    }
}

fn load_split(d: &DataArgs, split: Split) -> Result<(Manifest, Dataset)> {
    let manifest = Manifest::load(&d.data)?;
    let (data, stats) = manifest.load_split(split, d.strict)?;
    if stats.loaded < stats.outfits_seen {
        log::warn!(
            "{split}: loaded {} of {} outfits ({} missing items, {} missing descriptions)",
            stats.loaded,
            stats.outfits_seen,
            stats.missing_items,
            stats.missing_text
        );
    }
    Ok((manifest, data))
}

fn apply_score(cfg: &mut TrainConfig, s: &ScoreArgs) {
    set(&mut cfg.mode, s.mode);
    set(&mut cfg.p, s.p);
    set(&mut cfg.alpha, s.alpha);
    set(&mut cfg.beta, s.beta);
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = overlay(&TrainConfig::preset(&a.preset)?, a.config.as_deref())?;
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.logit_scale, a.logit_scale);
    set(&mut cfg.k_outfit, a.k_outfit);
    set(&mut cfg.k_text, a.k_text);
    set(&mut cfg.checkpoint_every, a.checkpoint_every);
    if a.clip_norm.is_some() {
        cfg.clip_norm = a.clip_norm;
    }
    cfg.item &= !a.no_item;
    cfg.style &= !a.no_style;
    cfg.outfit &= !a.no_outfit;
    cfg.greedy_init &= !a.no_greedy_init;
    cfg.reproducible |= a.reproducible;
    cfg.drop_last &= !a.keep_last;
    apply_score(&mut cfg, &a.score);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    checkpoint: &'a Path,
    log: &'a Path,
    epochs: usize,
    final_loss: Option<f64>,
    aborted: Option<&'a str>,
    final_metrics: Option<Metrics>,
}

fn train(a: &TrainArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = train_config(a)?;
    let (manifest, data) = load_split(&a.data, Split::Train)?;
    let ck_path = a.out.clone().unwrap_or_else(|| manifest.root.join(CHECKPOINT_FILE));
    let log_path = a.log.clone().unwrap_or_else(|| manifest.root.join(TRAIN_LOG_FILE));
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            Trainer::resume(cfg.clone(), ck.params, ck.optimizer, ck.epochs_completed)?
        }
        None => Trainer::new(cfg.clone(), data.dim)?,
    };
    let every = cfg.checkpoint_every;
    let mut log = trainer.run(&data, |t, rec| {
        if !json {
            let _ = writeln!(
                out,
                "epoch {:>3}  lr {:.3e}  loss {:.5}  item {:.5}  style {:.5}  outfit {:.5}",
                rec.epoch + 1,
                rec.lr,
                rec.mean_total,
                rec.mean_item,
                rec.mean_style,
                rec.mean_outfit
            );
        }
        if every > 0 && t.epochs_done % every == 0 {
            Checkpoint::from_trainer(t, true).save(&ck_path)?;
        }
        Ok(())
    })?;
    Checkpoint::from_trainer(&trainer, true).save(&ck_path)?;
    if manifest.splits.contains_key(&a.eval_split) {
        let (_, held_out) = load_split(&a.data, a.eval_split)?;
        let ev = evaluate(&held_out, &trainer.params, &trainer.model, &cfg.score_config())?;
        log.final_metrics = Some(ev.metrics);
    }
    log.write_jsonl(&log_path)?;
    let report = TrainReport {
        checkpoint: &ck_path,
        log: &log_path,
        epochs: log.epochs.len(),
        final_loss: log.epochs.last().map(|e| e.mean_total),
        aborted: log.aborted.as_deref(),
        final_metrics: log.final_metrics,
    };
    if json {
        emit_json(out, &report)?;
    } else {
        if let Some(m) = &log.final_metrics {
            emit(out, format!("{} ({}): {m}", a.eval_split, cfg.mode))?;
        }
        emit(out, format!("checkpoint: {}", ck_path.display()))?;
        emit(out, format!("log: {}", log_path.display()))?;
    }
    match &log.aborted {
        Some(reason) => Err(Error::InvalidArgument(format!(
            "training aborted ({reason}); last good parameters saved to {}",
            ck_path.display()
        ))),
        None => Ok(()),
    }
}

fn load_model(m: &ModelArgs, manifest: &Manifest) -> Result<(Checkpoint, ScoreConfig)> {
    let path = m.checkpoint.clone().unwrap_or_else(|| manifest.root.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path)?;
    let mut cfg = overlay(&ck.config, m.config.as_deref())?;
    apply_score(&mut cfg, &m.score);
    Ok((ck, cfg.score_config()))
}

#[derive(Serialize)]
struct ResultLine<'a> {
    query_id: &'a str,
    gt_rank: Option<usize>,
    ranked: &'a [(String, f64)],
}

fn eval(a: &EvalArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let (manifest, data) = load_split(&a.data, a.split)?;
    let (ck, score) = load_model(&a.model, &manifest)?;
    let ev = evaluate(&data, &ck.params, &ck.model, &score)?;
    let path = a
        .results
        .clone()
        .unwrap_or_else(|| manifest.root.join(format!("results_{}.jsonl", a.split)));
    write_results(&path, &ev.results, a.keep)?;
    if json {
        emit_json(out, &ev.metrics)
    } else {
        emit(out, format!("{} ({}): {}", a.split, score.mode, ev.metrics))?;
        emit(out, format!("per-query results: {}", path.display()))
    }
}

fn write_results(path: &Path, results: &[RetrievalResult], keep: usize) -> Result<()> {
    let mut body = String::new();
    for r in results {
        let line = ResultLine {
            query_id: &r.query_id,
            gt_rank: r.gt_rank,
            ranked: &r.ranked[..keep.min(r.ranked.len())],
        };
        body.push_str(&serde_json::to_string(&line).map_err(|e| Error::json(path, e))?);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn query(a: &QueryArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let (manifest, data) = load_split(&a.data, a.split)?;
    let (ck, score) = load_model(&a.model, &manifest)?;
    let bundle = read_bundle(&a.text)?;
    let record = match &a.id {
        Some(id) => bundle
            .records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Error::MissingId(id.clone()))?,
        None => bundle
            .records
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: bundle is empty", a.text.display())))?,
    };
    let key = crate::model::sample_key(&record.id);
    let text = ck.params.encode(&ck.model, Side::Text, &record.tokens, key)?;
    let mut scores = Vec::with_capacity(data.len());
    for s in &data.samples {
        let o = ck.params.encode(&ck.model, Side::Outfit, &s.e_o, s.key())?;
        let v = level_scores(&o, &text, ck.model.strict)?.score(&score);
        scores.push((s.outfit_id.clone(), f64::from(v)));
    }
    let ranked = RetrievalResult::new(record.id.clone(), scores);
    let top = &ranked.ranked[..a.top.min(ranked.ranked.len())];
    if json {
        emit_json(
            out,
            &serde_json::json!({
                "query_id": ranked.query_id,
                "mode": score.mode,
                "gt_rank": ranked.gt_rank,
                "top": top,
            }),
        )
    } else {
        emit(out, format!("query {} ({}):", ranked.query_id, score.mode))?;
        for (i, (id, s)) in top.iter().enumerate() {
            emit(out, format!("{:>4}  {id}  {s:.6}", i + 1))?;
        }
        Ok(())
    }
}

fn find<'a>(data: &'a Dataset, id: &str) -> Result<&'a OutfitSample> {
    data.get(id).ok_or_else(|| Error::MissingId(id.to_string()))
}

fn export(a: &ExportArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let (manifest, data) = load_split(&a.data, a.split)?;
    let (ck, score) = load_model(&a.model, &manifest)?;
    let outfit = find(&data, &a.outfit)?;
    let text = find(&data, a.query.as_deref().unwrap_or(&a.outfit))?;
    let ex = interactions(text, outfit, &ck.params, &ck.model, &score)?;
    let paths = export_interactions(&ex, &a.out)?;
    if json {
        emit_json(
            out,
            &serde_json::json!({
                "json": paths.json,
                "item_csv": paths.item_csv,
                "style_csv": paths.style_csv,
                "scores": ex.scores,
            }),
        )
    } else {
        emit(
            out,
            format!(
                "{} vs description of {}: item {}x{}, style {}x{}, score {:.6} ({})",
                ex.outfit_id,
                ex.query_id,
                ex.item_ids.len(),
                ex.token_strings.len(),
                ex.outfit_clusters.len(),
                ex.text_clusters.len(),
                ex.scores.score,
                ex.scores.mode
            ),
        )?;
        for p in [&paths.json, &paths.item_csv, &paths.style_csv] {
            emit(out, format!("wrote {}", p.display()))?;
        }
        Ok(())
    }
}

fn inspect(a: &InspectArgs, json: bool, out: &mut dyn Write) -> Result<()> {
    let s = Checkpoint::load(&a.path)?.summary();
    if json {
        return emit_json(out, &s);
    }
    emit(
        out,
        format!(
            "format v{}  D={}  epochs {}  parameters {}  optimizer {}",
            s.format_version,
            s.dim,
            s.epochs_completed,
            s.parameter_count,
            match s.optimizer_steps {
                Some(n) => format!("{n} steps"),
                None => "absent".into(),
            }
        ),
    )?;
    emit(
        out,
        format!(
            "lr {:e}  batch {}  epochs {}  levels item={} style={} outfit={}  greedy_init {}  mode {}",
            s.config.lr,
            s.config.batch_size,
            s.config.epochs,
            s.config.item,
            s.config.style,
            s.config.outfit,
            s.config.greedy_init,
            s.config.mode
        ),
    )?;
    for t in &s.tensors {
        emit(out, format!("  {:<40} {:>4}x{:<4} |w| {:.6}", t.name, t.rows, t.cols, t.l2_norm))?;
    }
    Ok(())
}
