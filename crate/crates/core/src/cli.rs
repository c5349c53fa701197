//! Batch front-end: `gen`, `init`, `train`, `embed`, `eval`, `contrib`,
//! `ablate`. Every command is a pure function of its inputs, the config file,
//! `--set` overrides and `--seed`; only model headers carry a wall-clock
//! timestamp, and `--no-timestamp` zeroes it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::descriptor::{
    generate_corpus, read_dataset, write_dataset, DatasetFormat, Descriptor, ExampleRecord, QualityTag,
    SourceKind, SyntheticCorpusSpec, Template, TrainingData,
};
use crate::error::{Error, Result};
use crate::evaluation::{all_pairs, identify, summarize, verify, Curve, Summary, VerificationPair, REPORT_FARS};
use crate::head::TemplateEmbedding;
use crate::init::{init_model, Architecture};
use crate::model::{read_model, write_model, Model};
use crate::training::{train, write_log_csv, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ghostvlad", version, about = "Template aggregation with ghost clusters")]
pub struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the corpus and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write 0 into model header timestamps.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Config override, `section.key=value` (value parsed as TOML, else a string).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic descriptor corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize a model from a dataset (k-means and PCA).
    Init {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the trained model and a per-epoch CSV log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Embed templates into a GVD1 file keyed by template id.
    Embed {
        #[command(flatten)]
        templates: TemplateArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verification and identification curves plus a JSON summary.
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        /// JSON object with optional `pairs`, `gallery` and `probes` (template ids).
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-example relative contribution to each template.
    Contrib {
        #[command(flatten)]
        templates: TemplateArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every point of a (K, G, set_size, D) grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// TOML with list-valued `clusters`, `ghosts`, `set_size`, `out_dim`;
        /// defaults to the config's `[ablate]` table.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON-lines template protocol; without it each identity yields one
    /// template per data split.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
}

/// Held-out split used by `init`, `train`, `ablate` and default templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub val_template_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { val_fraction: 0.2, val_template_size: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub clusters: Vec<usize>,
    pub ghosts: Vec<usize>,
    pub set_size: Vec<usize>,
    pub out_dim: Vec<usize>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid { clusters: vec![4, 8], ghosts: vec![0, 1, 2], set_size: vec![2, 3], out_dim: vec![16] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: SyntheticCorpusSpec,
    pub split: SplitConfig,
    pub model: Architecture,
    pub train: TrainConfig,
    pub ablate: AblationGrid,
}

impl ExperimentConfig {
    /// Loads `path` (or defaults), then applies dotted `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{spec}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

struct Context {
    config: ExperimentConfig,
    timestamp: u64,
}

/// Entry point for the binary: parses `std::env::args`, runs, and maps
/// failures to exit code 2 with one `error kind=.. msg=..` line on stderr.
pub fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                report(e.kind(), &e.to_string());
                ExitCode::from(2)
            }
        },
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string();
            report("UsageError", msg.lines().next().unwrap_or("").trim_start_matches("error: "));
            ExitCode::from(2)
        }
    }
}

fn report(kind: &str, msg: &str) {
    let quoted = serde_json::to_string(msg).unwrap_or_else(|_| "\"\"".into());
    eprintln!("error kind={kind} msg={quoted}");
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.corpus.seed = seed;
        config.train.seed = seed;
    }
    let timestamp = if cli.no_timestamp {
        0
    } else {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    };
    let ctx = Context { config, timestamp };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| dispatch(&ctx, &cli.command))
}

fn dispatch(ctx: &Context, command: &Command) -> Result<()> {
    match command {
        Command::Gen { out } => cmd_gen(ctx, out),
        Command::Init { data, out } => cmd_init(ctx, data, out),
        Command::Train { data, model, out, log } => cmd_train(ctx, data, model, out, log.as_deref()),
        Command::Embed { templates, model, out } => cmd_embed(ctx, templates, model, out),
        Command::Eval { embeddings, protocol, out_dir } => cmd_eval(embeddings, protocol.as_deref(), out_dir),
        Command::Contrib { templates, model, out } => cmd_contrib(ctx, templates, model, out),
        Command::Ablate { data, grid, out_dir } => cmd_ablate(ctx, data, grid.as_deref(), out_dir),
    }
}

fn cmd_gen(ctx: &Context, out: &Path) -> Result<()> {
    let spec = &ctx.config.corpus;
    let records = generate_corpus(spec)?;
    write_dataset(out, spec.dim, &records, DatasetFormat::from_path(out))
}

fn load_split(ctx: &Context, data: &Path) -> Result<TrainingData> {
    let (dim, records) = read_dataset(data)?;
    let s = &ctx.config.split;
    TrainingData::split(dim, &records, s.val_fraction, s.val_template_size)
}

fn cmd_init(ctx: &Context, data: &Path, out: &Path) -> Result<()> {
    let data = load_split(ctx, data)?;
    let model = init_model(&data, &ctx.config.model, ctx.config.train.seed)?;
    write_model(out, &model, ctx.timestamp)
}

fn cmd_train(ctx: &Context, data: &Path, model: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let data = load_split(ctx, data)?;
    let (model, _) = read_model(model)?;
    let outcome = train(&data, model, &ctx.config.train)?;
    write_model(out, &outcome.model, ctx.timestamp)?;
    if let Some(path) = log {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_log_csv(&outcome.log, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// A template together with its external id.
struct Keyed {
    id: u32,
    template: Template,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolLine {
    template_id: u32,
    subject: u32,
    media: Vec<ProtocolMedia>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolMedia {
    media_id: u32,
    kind: ProtocolKind,
}

#[derive(Deserialize, Clone, Copy, PartialEq)]
#[serde(rename_all = "lowercase")]
enum ProtocolKind {
    Still,
    Video,
}

fn load_templates(ctx: &Context, args: &TemplateArgs) -> Result<(usize, Vec<Keyed>)> {
    let (dim, records) = read_dataset(&args.data)?;
    let templates = match &args.protocol {
        Some(p) => protocol_templates(&records, p)?,
        None => split_templates(&records, ctx.config.split.val_fraction),
    };
    Ok((dim, templates))
}

/// One template per identity per split, in identity order; the held-out part
/// matches `TrainingData::split`.
fn split_templates(records: &[ExampleRecord], val_fraction: f64) -> Vec<Keyed> {
    let mut by_identity: BTreeMap<u32, Vec<ExampleRecord>> = BTreeMap::new();
    for r in records {
        by_identity.entry(r.identity).or_default().push(r.clone());
    }
    let mut out = Vec::new();
    for (subject, recs) in by_identity {
        let n_val = (recs.len() as f64 * val_fraction).round() as usize;
        let (train, val) = recs.split_at(recs.len() - n_val);
        for part in [train, val] {
            if let Ok(template) = Template::new(subject, part.to_vec()) {
                out.push(Keyed { id: out.len() as u32, template });
            }
        }
    }
    out
}

fn protocol_templates(records: &[ExampleRecord], path: &Path) -> Result<Vec<Keyed>> {
    let mut by_media: HashMap<u32, Vec<&ExampleRecord>> = HashMap::new();
    for r in records {
        by_media.entry(r.media_id).or_default().push(r);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::Format { location: crate::error::Location::Line(i + 1), message: m };
        let entry: ProtocolLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        if !seen.insert(entry.template_id) {
            return Err(at(format!("duplicate template_id {}", entry.template_id)));
        }
        let mut recs = Vec::new();
        for m in &entry.media {
            let found = by_media.get(&m.media_id).ok_or_else(|| at(format!("unknown media_id {}", m.media_id)))?;
            for r in found {
                let kind = match r.source_kind {
                    SourceKind::Still => ProtocolKind::Still,
                    SourceKind::VideoFrame => ProtocolKind::Video,
                };
                if kind != m.kind {
                    return Err(at(format!("media_id {} has a different kind in the dataset", m.media_id)));
                }
                if r.identity != entry.subject {
                    return Err(at(format!("media_id {} belongs to identity {}", m.media_id, r.identity)));
                }
                recs.push((*r).clone());
            }
        }
        let template = Template::new(entry.subject, recs).map_err(|e| at(e.to_string()))?;
        out.push(Keyed { id: entry.template_id, template });
    }
    Ok(out)
}

fn cmd_embed(ctx: &Context, args: &TemplateArgs, model: &Path, out: &Path) -> Result<()> {
    let (model, _) = read_model(model)?;
    let (_, keyed) = load_templates(ctx, args)?;
    let templates: Vec<Template> = keyed.iter().map(|k| k.template.clone()).collect();
    let embeddings = model.embed_all(&templates)?;
    let records: Vec<ExampleRecord> = keyed
        .iter()
        .zip(embeddings)
        .map(|(k, e)| ExampleRecord {
            descriptor: Descriptor::from_raw(e.values().to_vec()),
            identity: k.template.subject(),
            media_id: k.id,
            source_kind: SourceKind::Still,
            quality_tag: QualityTag::Clean,
        })
        .collect();
    write_dataset(out, model.head.output_dim(), &records, DatasetFormat::Binary)
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalProtocol {
    pairs: Option<Vec<(u32, u32)>>,
    gallery: Option<Vec<u32>>,
    probes: Option<Vec<u32>>,
}

#[derive(Serialize)]
struct EvalReport {
    templates: usize,
    genuine_pairs: usize,
    impostor_pairs: usize,
    gallery: usize,
    probes: usize,
    #[serde(flatten)]
    summary: Summary,
}

fn cmd_eval(embeddings: &Path, protocol: Option<&Path>, out_dir: &Path) -> Result<()> {
    let (_, records) = read_dataset(embeddings)?;
    let protocol: EvalProtocol = match protocol {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Format {
            location: crate::error::Location::Line(e.line()),
            message: e.to_string(),
        })?,
        None => EvalProtocol::default(),
    };
    let embs: Vec<TemplateEmbedding> =
        records.iter().map(|r| TemplateEmbedding::from_values(r.descriptor.values().to_vec())).collect();
    let subjects: Vec<u32> = records.iter().map(|r| r.identity).collect();
    let mut index = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if index.insert(r.media_id, i).is_some() {
            return Err(Error::Config(format!("duplicate template id {} in embeddings", r.media_id)));
        }
    }
    let lookup = |id: u32| index.get(&id).copied().ok_or_else(|| Error::Config(format!("unknown template id {id}")));

    let pairs = match &protocol.pairs {
        Some(ps) => ps
            .iter()
            .map(|&(a, b)| {
                let (a, b) = (lookup(a)?, lookup(b)?);
                Ok(VerificationPair { a, b, genuine: subjects[a] == subjects[b] })
            })
            .collect::<Result<Vec<_>>>()?,
        None => all_pairs(&subjects),
    };
    let verification = verify(&pairs, &embs)?;

    let gallery = match &protocol.gallery {
        Some(g) => g.iter().map(|&id| lookup(id)).collect::<Result<Vec<_>>>()?,
        None => default_gallery(&subjects),
    };
    let probes = match &protocol.probes {
        Some(p) => p.iter().map(|&id| lookup(id)).collect::<Result<Vec<_>>>()?,
        None => (0..records.len()).filter(|i| !gallery.contains(i)).collect(),
    };
    let identification = identify(&probes, &gallery, &embs, &subjects)?;

    fs::create_dir_all(out_dir)?;
    write_curve(&out_dir.join("roc.csv"), &verification.roc)?;
    write_curve(&out_dir.join("det.csv"), &identification.det)?;
    write_curve(&out_dir.join("cmc.csv"), &identification.cmc)?;
    let report = EvalReport {
        templates: records.len(),
        genuine_pairs: verification.genuine_scores().len(),
        impostor_pairs: verification.impostor_scores().len(),
        gallery: gallery.len(),
        probes: probes.len(),
        summary: summarize(Some(&verification), Some(&identification)),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out_dir.join("summary.json"), json + "\n")?;
    Ok(())
}

/// First template of each subject in the lower half of the sorted subject
/// list; the remaining subjects are non-mated.
fn default_gallery(subjects: &[u32]) -> Vec<usize> {
    let distinct: BTreeSet<u32> = subjects.iter().copied().collect();
    let enrolled: BTreeSet<u32> = distinct.iter().copied().take(distinct.len().div_ceil(2)).collect();
    let mut taken = BTreeSet::new();
    (0..subjects.len()).filter(|&i| enrolled.contains(&subjects[i]) && taken.insert(subjects[i])).collect()
}

fn write_curve(path: &Path, curve: &Curve) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    curve.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_contrib(ctx: &Context, args: &TemplateArgs, model: &Path, out: &Path) -> Result<()> {
    let (model, _) = read_model(model)?;
    let (_, keyed) = load_templates(ctx, args)?;
    let templates: Vec<Template> = keyed.iter().map(|k| k.template.clone()).collect();
    let rows = crate::evaluation::contribution_report(&templates, &model)?;
    let mut w = BufWriter::new(fs::File::create(out)?);
    writeln!(w, "template_id,example_idx,quality_tag,relative_contribution")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", keyed[r.template].id, r.example, r.quality_tag.as_str(), r.relative)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_ablate(ctx: &Context, data: &Path, grid: Option<&Path>, out_dir: &Path) -> Result<()> {
    let grid: AblationGrid = match grid {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.message().to_string()))?,
        None => ctx.config.ablate.clone(),
    };
    let data = load_split(ctx, data)?;
    let subjects: Vec<u32> = data.validation.iter().map(|t| t.subject()).collect();
    let pairs = all_pairs(&subjects);

    fs::create_dir_all(out_dir)?;
    let mut w = BufWriter::new(fs::File::create(out_dir.join("ablation.csv"))?);
    write!(w, "clusters,ghosts,set_size,out_dim,final_loss")?;
    for far in REPORT_FARS {
        write!(w, ",tar_far_{far:e}")?;
    }
    writeln!(w)?;
    for &clusters in &grid.clusters {
        for &ghosts in &grid.ghosts {
            for &set_size in &grid.set_size {
                for &out_dim in &grid.out_dim {
                    let arch = Architecture { clusters, ghosts, out_dim, ..ctx.config.model.clone() };
                    let cfg = TrainConfig { set_size, ..ctx.config.train.clone() };
                    let model: Model = init_model(&data, &arch, cfg.seed)?;
                    let outcome = train(&data, model, &cfg)?;
                    let loss = outcome.log.last().map_or(f64::NAN, |l| l.train_loss);
                    let embs = outcome.model.embed_all(&data.validation)?;
                    let v = verify(&pairs, &embs)?;
                    write!(w, "{clusters},{ghosts},{set_size},{out_dim},{loss}")?;
                    for far in REPORT_FARS {
                        write!(w, ",{}", v.tar_at_far(far))?;
                    }
                    writeln!(w)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
