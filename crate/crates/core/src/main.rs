use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use mmembed::concepts::{concept_report, probe_sets, DEFAULT_TOP_K};
use mmembed::frontend::{decode_wav, log_mel_spectrogram, SpectrogramConfig};
use mmembed::losses::LossKind;
use mmembed::model::Variant;
use mmembed::retrieval::{evaluate_all_modes, evaluate_dataset, format_table, EmbeddingsFile, RetrievalReport};
use mmembed::sampler::{Dataset, Manifest};
use mmembed::synthetic::{
    benchmark_train_config, generate_paired_dataset, gradcheck_fixture, oracle_pairing_check, planted_concept_sets,
    PlantedConceptSpec, SyntheticSpec,
};
use mmembed::train::{gradcheck_batch, merge_table, train, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "mmembed", version, about = "Multi-modal contrastive embeddings: featurize, train, evaluate, probe")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config. Keys set here win over the same setting given as a flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; created if missing. Every run appends to runs.jsonl here.
    #[arg(long, global = true, default_value = "mmembed-out")]
    out: PathBuf,
    /// Worker threads for similarity scoring.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Convert WAV files to log-mel spectrogram feature files.
    Featurize(FeaturizeArgs),
    /// Generate a synthetic paired dataset with planted concepts.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Retrieval report for every supported mode.
    Evaluate(EvaluateArgs),
    /// Rank embedding dimensions by label purity of their top activations.
    ProbeConcepts(ProbeArgs),
    /// Finite-difference check of the analytic gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    window_ms: Option<f64>,
    #[arg(long)]
    hop_ms: Option<f64>,
    #[arg(long)]
    sample_rate: Option<u32>,
}

#[derive(Args)]
struct SynthArgs {
    /// Start from the retrieval benchmark (per-video latent enabled).
    #[arg(long)]
    benchmark: bool,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    clips_per_concept: Option<usize>,
    /// Feature dimension of every modality.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    instance_scale: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_serde::<Variant>)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_serde::<LossKind>)]
    loss: Option<LossKind>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Manifest split to train on ("all" for every video).
    #[arg(long)]
    split: Option<String>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "embeddings", requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split to evaluate ("all" for every video).
    #[arg(long, default_value = "test")]
    split: String,
    /// JSON embeddings {video, audio, text, language}; row i of each set is paired.
    #[arg(long, conflicts_with = "checkpoint")]
    embeddings: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, required_unless_present = "planted", requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    split: String,
    /// Probe generated planted-concept embeddings instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    planted: bool,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Rows of the printed table.
    #[arg(long, default_value_t = 20)]
    top: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_serde::<Variant>, default_value = "av")]
    variant: Variant,
    #[arg(long, value_parser = parse_serde::<LossKind>, default_value = "mms")]
    loss: LossKind,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// What a run reports about itself in runs.jsonl.
#[derive(Serialize, Default)]
struct RunRecord {
    command: String,
    argv: Vec<String>,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    /// Git-style (blob-framed SHA-256) hashes of every input.
    inputs: BTreeMap<String, String>,
    metrics: serde_json::Value,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

impl RunRecord {
    fn hash_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), blob_hash(&bytes));
        Ok(())
    }

    /// Hashes the manifest plus a tree-style digest of every feature file it names.
    fn hash_manifest(&mut self, path: &Path, manifest: &Manifest) -> Result<()> {
        self.hash_file(path)?;
        let mut lines = Vec::new();
        for r in &manifest.records {
            for rel in r.features.values() {
                let p = manifest.resolve(rel);
                let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
                lines.push(format!("{} {}\n", blob_hash(&bytes), rel.display()));
            }
        }
        lines.sort();
        self.inputs
            .insert(format!("{}#features", path.display()), blob_hash(lines.concat().as_bytes()));
        Ok(())
    }
}

fn load_table(path: Option<&Path>) -> Result<Option<toml::Table>> {
    path.map(|p| {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))
    })
    .transpose()
}

/// Defaults, then flags, then the config file.
fn layered<T: Serialize + DeserializeOwned>(defaults: &T, flags: &toml::Table, file: Option<&toml::Table>) -> Result<T> {
    let mut merged = toml::Table::try_from(defaults)?;
    merge_table(&mut merged, flags);
    if let Some(file) = file {
        merge_table(&mut merged, file);
    }
    Ok(toml::Value::Table(merged).try_into()?)
}

fn set<V: Into<toml::Value>>(table: &mut toml::Table, path: &[&str], value: Option<V>) {
    let Some(value) = value else { return };
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("flag tables are tables");
    }
    t.insert(last.to_string(), value.into());
}

fn serde_str<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(run: &mut RunRecord, path: &Path, split: &str) -> Result<Dataset> {
    let manifest = Manifest::load(path)?;
    run.hash_manifest(path, &manifest)?;
    let dataset = Dataset::load(&manifest)?;
    Ok(if split == "all" { dataset } else { dataset.split(Some(split)) })
}

fn featurize(common: &Common, args: &FeaturizeArgs, file: Option<&toml::Table>, run: &mut RunRecord) -> Result<()> {
    let mut flags = toml::Table::new();
    set(&mut flags, &["num_mel_bands"], args.bands.map(|b| b as i64));
    set(&mut flags, &["window_ms"], args.window_ms);
    set(&mut flags, &["hop_ms"], args.hop_ms);
    set(&mut flags, &["sample_rate_hz"], args.sample_rate.map(i64::from));
    let config: SpectrogramConfig = layered(&SpectrogramConfig::default(), &flags, file)?;
    config.validate()?;
    run.config = serde_json::to_value(&config)?;
    let mut frames = BTreeMap::new();
    for input in &args.inputs {
        run.hash_file(input)?;
        let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
        let wave = decode_wav(&bytes).with_context(|| format!("decoding {}", input.display()))?;
        let spec = log_mel_spectrogram(&wave, &config).with_context(|| format!("featurizing {}", input.display()))?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("audio");
        let out = common.out.join(format!("{stem}.audio.mmft"));
        spec.to_feature_sequence().write(&out)?;
        println!("{} -> {} ({} frames x {} bands)", input.display(), out.display(), spec.num_frames(), spec.num_bands());
        frames.insert(input.display().to_string(), spec.num_frames());
    }
    run.metrics = json!({ "frames": frames });
    Ok(())
}

fn synth(common: &Common, args: &SynthArgs, file: Option<&toml::Table>, run: &mut RunRecord) -> Result<()> {
    let base = if args.benchmark {
        SyntheticSpec::retrieval_benchmark()
    } else {
        SyntheticSpec::default()
    };
    let mut flags = toml::Table::new();
    set(&mut flags, &["num_concepts"], args.concepts.map(|v| v as i64));
    set(&mut flags, &["clips_per_concept"], args.clips_per_concept.map(|v| v as i64));
    set(&mut flags, &["noise_sigma"], args.sigma);
    set(&mut flags, &["instance_scale"], args.instance_scale);
    set(&mut flags, &["seed"], common.seed.map(|v| v as i64));
    if let Some(d) = args.dim {
        for m in base.dims.keys() {
            set(&mut flags, &["dims", m.key()], Some(d as i64));
        }
    }
    let spec: SyntheticSpec = layered(&base, &flags, file)?;
    run.config = serde_json::to_value(&spec)?;
    run.seeds.insert("seed".into(), spec.seed);
    let data = generate_paired_dataset(&spec)?;
    let manifest = data.write_to(&common.out)?;
    let train_toml = common.out.join("train.toml");
    std::fs::write(&train_toml, benchmark_train_config(&spec).to_toml()?)
        .with_context(|| format!("writing {}", train_toml.display()))?;
    let mut margins = BTreeMap::new();
    for &m in spec.dims.keys() {
        margins.insert(m.key(), oracle_pairing_check(&data.dataset, m)?);
    }
    println!("wrote {} videos to {}", data.dataset.len(), manifest.display());
    println!("matching train config: {}", train_toml.display());
    for (m, margin) in &margins {
        println!("pairing margin {m:<10} {margin:.4}");
    }
    run.metrics = json!({ "videos": data.dataset.len(), "pairing_margin": margins });
    Ok(())
}

fn train_cmd(common: &Common, args: &TrainArgs, file: Option<&toml::Table>, run: &mut RunRecord) -> Result<()> {
    let mut flags = toml::Table::new();
    set(&mut flags, &["epochs"], args.epochs.map(|v| v as i64));
    set(&mut flags, &["init_seed"], common.seed.map(|v| v as i64));
    set(&mut flags, &["sampler", "seed"], common.seed.map(|v| v as i64));
    set(&mut flags, &["model", "variant"], args.variant.as_ref().map(serde_str));
    set(&mut flags, &["loss", "kind"], args.loss.as_ref().map(serde_str));
    set(&mut flags, &["optimizer", "learning_rate"], args.learning_rate);
    set(&mut flags, &["train_split"], args.split.clone().filter(|s| s != "all"));
    let mut config = TrainConfig::resolve(&flags, file)?;
    if args.split.as_deref() == Some("all") {
        config.train_split = None;
    }
    let checkpoint_path = common.out.join("checkpoint.mmck");
    config.checkpoint_path = Some(checkpoint_path.clone());
    run.config = serde_json::to_value(&config)?;
    run.seeds.insert("init_seed".into(), config.init_seed);
    run.seeds.insert("sampler_seed".into(), config.sampler.seed);

    let dataset = load_dataset(run, &args.manifest, "all")?;
    let started = std::time::Instant::now();
    let outcome = match &args.init_checkpoint {
        Some(path) => {
            run.hash_file(path)?;
            mmembed::train::train_from(Checkpoint::load(path)?, &config, &dataset)?
        }
        None => train(&config, &dataset)?,
    };
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    }
    println!("checkpoint: {}", checkpoint_path.display());
    run.metrics = json!({
        "epoch_losses": outcome.epoch_losses,
        "seconds": started.elapsed().as_secs_f64(),
        "checkpoint": checkpoint_path,
    });
    Ok(())
}

fn print_reports(common: &Common, reports: &[RetrievalReport], run: &mut RunRecord) -> Result<()> {
    print!("{}", format_table(reports));
    let json: Vec<_> = reports.iter().map(RetrievalReport::to_json).collect();
    write_json(&common.out.join("retrieval.json"), &json)?;
    run.metrics = serde_json::Value::Array(json);
    Ok(())
}

fn evaluate(common: &Common, args: &EvaluateArgs, run: &mut RunRecord) -> Result<()> {
    run.config = json!({ "ks": args.ks, "split": args.split });
    if let Some(path) = &args.embeddings {
        run.hash_file(path)?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let emb = serde_json::from_str::<EmbeddingsFile>(&text)?.into_embeddings()?;
        let reports = evaluate_all_modes(&emb, &args.ks, common.threads)?;
        return print_reports(common, &reports, run);
    }
    let (Some(ckpt_path), Some(manifest)) = (&args.checkpoint, &args.manifest) else {
        bail!("evaluate needs --embeddings or --checkpoint with --manifest");
    };
    run.hash_file(ckpt_path)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let dataset = load_dataset(run, manifest, &args.split)?;
    if dataset.is_empty() {
        bail!("split {:?} of {} is empty", args.split, manifest.display());
    }
    run.config["train"] = serde_json::to_value(&ckpt.config)?;
    let reports = evaluate_dataset(&ckpt.params, &ckpt.config.model, &dataset, &ckpt.config.sampler, &args.ks, common.threads)?;
    print_reports(common, &reports, run)
}

fn probe(common: &Common, args: &ProbeArgs, file: Option<&toml::Table>, run: &mut RunRecord) -> Result<()> {
    let (visual, audio) = if args.planted {
        let mut flags = toml::Table::new();
        set(&mut flags, &["seed"], common.seed.map(|v| v as i64));
        let spec: PlantedConceptSpec = layered(&PlantedConceptSpec::default(), &flags, file)?;
        run.config = serde_json::to_value(&spec)?;
        run.seeds.insert("seed".into(), spec.seed);
        planted_concept_sets(&spec)?
    } else {
        let (Some(ckpt_path), Some(manifest)) = (&args.checkpoint, &args.manifest) else {
            bail!("probe-concepts needs --planted or --checkpoint with --manifest");
        };
        run.hash_file(ckpt_path)?;
        let ckpt = Checkpoint::load(ckpt_path)?;
        let dataset = load_dataset(run, manifest, &args.split)?;
        run.config = json!({ "split": args.split, "train": ckpt.config });
        probe_sets(&ckpt.params, &ckpt.config.model, &dataset, &ckpt.config.sampler)?
    };
    run.config["k"] = json!(args.k);
    let report = concept_report(&visual, &audio, args.k)?;
    print!("{}", report.format_table(args.top));
    let path = common.out.join("concepts.json");
    std::fs::write(&path, report.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))?;
    let top: Vec<_> = report.dimensions.iter().take(args.top).map(|d| json!({ "index": d.index, "combined": d.label.combined })).collect();
    run.metrics = json!({ "dimensions": report.dimensions.len(), "top": top });
    Ok(())
}

fn gradcheck(common: &Common, args: &GradcheckArgs, run: &mut RunRecord) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    run.seeds.insert("seed".into(), seed);
    let (config, params, batch) = gradcheck_fixture(args.variant, args.loss, seed)?;
    run.config = json!({ "train": config, "step": args.step, "tolerance": args.tolerance });
    let report = gradcheck_batch(&params, &batch, &config, args.step)?;
    println!(
        "max relative error: {:.3e} over {} parameters ({} / {})",
        report.max_relative_error,
        report.scalars_checked,
        serde_str(&args.variant),
        serde_str(&args.loss)
    );
    if let Some((name, index, analytic, numeric)) = &report.worst {
        println!("worst: {name}[{index}] analytic {analytic:.6e} numeric {numeric:.6e}");
    }
    run.metrics = json!({ "max_relative_error": report.max_relative_error, "scalars": report.scalars_checked });
    if !(report.max_relative_error < args.tolerance) {
        bail!("gradient check failed: {:.3e} >= {:.1e}", report.max_relative_error, args.tolerance);
    }
    Ok(())
}

fn dispatch(cli: &Cli, run: &mut RunRecord) -> Result<()> {
    let common = &cli.common;
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    if let Some(path) = &common.config {
        run.hash_file(path)?;
    }
    let file = load_table(common.config.as_deref())?;
    let file = file.as_ref();
    match &cli.command {
        Command::Featurize(a) => featurize(common, a, file, run),
        Command::Synth(a) => synth(common, a, file, run),
        Command::Train(a) => train_cmd(common, a, file, run),
        Command::Evaluate(a) => evaluate(common, a, run),
        Command::ProbeConcepts(a) => probe(common, a, file, run),
        Command::Gradcheck(a) => gradcheck(common, a, run),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Featurize(_) => "featurize",
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::ProbeConcepts(_) => "probe-concepts",
        Command::Gradcheck(_) => "gradcheck",
    }
}

fn append_record(out: &Path, record: &RunRecord) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(out)?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(out.join("runs.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut run = RunRecord {
        command: command_name(&cli.command).into(),
        argv: std::env::args().collect(),
        started_unix_ms: now_ms(),
        ..RunRecord::default()
    };
    let result = dispatch(&cli, &mut run);
    run.finished_unix_ms = now_ms();
    run.status = if result.is_ok() { "ok" } else { "error" }.into();
    if let Err(e) = &result {
        run.error = Some(format!("{e:#}"));
    }
    if let Err(e) = append_record(&cli.common.out, &run) {
        eprintln!("warning: could not append run record: {e:#}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
