//! `manet`: train, evaluate and inspect multimodal segmentation models.

mod manifest;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use manet::data::{self, ClassTaxonomy};
use manet::encoder;
use manet::model::{Manet, ParamReport};
use manet::train::{self, checkpoint, heatmap, ConfusionMatrix, LOG_HEADER};
use manet::{AdapterMode, Component, Modality, RunConfig};

use manifest::{now_ms, RunManifest};

#[derive(Parser)]
#[command(name = "manet", version, about = "Multimodal adapter segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metric log and manifest.
    Train(TrainArgs),
    /// Sliding-window evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Frozen and trainable parameter counts per component.
    Params(ParamsArgs),
    /// Generate a synthetic optical + elevation dataset.
    Synth(SynthArgs),
    /// Export class-probability and feature-magnitude heatmaps.
    Heatmap(HeatmapArgs),
}

/// Configuration sources, applied in order: preset, config file, `--set`,
/// then the dedicated flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting preset: toy, vit-b, vit-l or vit-h.
    #[arg(long)]
    preset: Option<String>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// none, standard or mmadapter.
    #[arg(long)]
    adapter: Option<AdapterMode>,
    /// optical or both.
    #[arg(long)]
    modality: Option<Modality>,
    /// Enable the pyramid fusion module.
    #[arg(long)]
    dfm: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.preset {
            Some(p) => RunConfig::preset(p)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(a) = self.adapter {
            cfg.model.adapter = a;
        }
        if let Some(m) = self.modality {
            cfg.model.modality = m;
        }
        if let Some(d) = self.dfm {
            cfg.model.dfm = d;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root containing `train/` and optionally `test/`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Sliding-window stride; defaults to half the window.
    #[arg(long)]
    stride: Option<usize>,
    /// Optional config that must match the checkpoint's model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accepted for symmetry with the other commands; evaluation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `metrics.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score the labels against themselves instead of running the model.
    #[arg(long)]
    labels_as_prediction: bool,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory for `params.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training patches.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Test patches.
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Accepted for symmetry; synthesis takes no model settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Patch id; defaults to the first patch of the split.
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = now_ms();
    let mut cfg = args.cfg.resolve()?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if cfg.model.adapter == AdapterMode::None {
        let report = ParamReport::from_ledger(&Manet::<f32>::ledger(&cfg.model)?);
        eprintln!(
            "warning: --adapter none leaves the encoder without trainable parameters; \
             only the fusion module and decoder ({} parameters) will be trained",
            report.trainable()
        );
    }
    let classes = cfg.model.classes;
    let train_set = data::load_split::<f32>(&args.data, "train", classes)?;
    let test_set = if args.data.join("test").is_dir() {
        data::load_split::<f32>(&args.data, "test", classes)?
    } else {
        Vec::new()
    };
    create_dir(&args.out)?;
    let config_path = args.out.join("config.cfg");
    write(&config_path, &cfg.to_text())?;

    let log_path = args.out.join("metrics.log");
    let mut log = format!("{LOG_HEADER}\n");
    let trained = train::train(&cfg, &train_set, &test_set, |rec| {
        let line = rec.log_line();
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    write(&log_path, &log)?;
    let ckpt_path = args.out.join("checkpoint.manc");
    checkpoint::save(&trained.model, &ckpt_path)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("checkpoint".to_string(), ckpt_path.display().to_string());
    artifacts.insert("metric_log".to_string(), log_path.display().to_string());
    artifacts.insert("config".to_string(), config_path.display().to_string());
    if let Some(m) = trained.log.last().and_then(|r| r.metrics.as_ref()) {
        let header = format!(
            "model: {}; stride={} window={} split=test patches={}",
            describe(&cfg),
            cfg.train.eval_stride,
            cfg.model.encoder.image_size,
            test_set.len()
        );
        let table = report::metrics_table(m, &ClassTaxonomy::default(), &header);
        print!("{table}");
        let path = args.out.join("metrics.txt");
        write(&path, &table)?;
        artifacts.insert("metrics".to_string(), path.display().to_string());
    }
    RunManifest {
        command: "train".into(),
        config: cfg.to_text(),
        seed: cfg.train.seed,
        dataset_fingerprint: Some(data::fingerprint(&args.data)?),
        artifacts,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    }
    .write(&args.out)
}

fn describe(cfg: &RunConfig) -> String {
    format!("modality={} adapter={} dfm={}", cfg.model.modality, cfg.model.adapter, cfg.model.dfm)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model =
        checkpoint::load::<f32>(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = RunConfig::parse_text(&text)?;
        if cfg.model != model.cfg {
            bail!("config {} does not match the checkpoint's model configuration", path.display());
        }
    }
    let window = model.cfg.encoder.image_size;
    let stride = args.stride.unwrap_or((window / 2).max(1));
    let taxonomy = ClassTaxonomy::default();
    let patches = data::load_split::<f32>(&args.data, &args.split, model.cfg.classes)?;
    if let Some(p) = patches.iter().find(|p| p.sample.height < window || p.sample.width < window) {
        bail!("patch `{}` ({}x{}) is smaller than the model window {window}", p.id, p.sample.height, p.sample.width);
    }
    let m = if args.labels_as_prediction {
        let mut cm = ConfusionMatrix::new(taxonomy.len());
        for p in &patches {
            let l = p.sample.labels_usize();
            cm.accumulate(&l, &l)?;
        }
        train::metrics(&cm, &taxonomy)?
    } else {
        train::evaluate(&model, &patches, stride, &taxonomy)?.1
    };
    let run = RunConfig { model: model.cfg.clone(), train: Default::default() };
    let header = format!(
        "model: {}; stride={stride} window={window} split={} patches={}",
        describe(&run),
        args.split,
        patches.len()
    );
    let table = report::metrics_table(&m, &taxonomy, &header);
    print!("{table}");
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("metrics.txt"), &table)?;
    }
    Ok(())
}

fn cmd_params(args: &ParamsArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let ledger = Manet::<f32>::ledger(&cfg.model)?;
    let report = ParamReport::from_ledger(&ledger);
    let e = &cfg.model.encoder;
    let title = format!(
        "image={} patch={} embed_dim={} depth={} heads={} bottleneck={}; {}",
        e.image_size,
        e.patch_size,
        e.embed_dim,
        e.depth,
        e.heads,
        cfg.model.bottleneck,
        describe(&cfg)
    );
    let text = report::params_table(&title, &report, &encoder::excluded_parameters(e));
    print!("{text}");
    if report.get(Component::Adapter).1 + report.get(Component::Dfm).1 + report.get(Component::Decoder).1 == 0 {
        eprintln!("warning: no trainable parameters");
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("params.txt"), &text)?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    data::write_dataset(&args.out, args.n, args.m, args.seed, args.size)?;
    let fp = data::fingerprint(&args.out)?;
    println!("wrote {} train + {} test patches to {} (fingerprint {fp})", args.n, args.m, args.out.display());
    Ok(())
}

fn cmd_heatmap(args: &HeatmapArgs) -> Result<()> {
    let model =
        checkpoint::load::<f32>(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if let Some(path) = &args.config {
        let cfg = RunConfig::parse_text(&fs::read_to_string(path)?)?;
        if cfg.model != model.cfg {
            bail!("config {} does not match the checkpoint's model configuration", path.display());
        }
    }
    let patch = match &args.patch {
        Some(id) => data::load_patch_dir::<f32>(&args.data.join(&args.split).join(id), model.cfg.classes)?,
        None => data::load_split::<f32>(&args.data, &args.split, model.cfg.classes)?.remove(0),
    };
    let files = heatmap::export_heatmaps(&model, &patch.sample, &args.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Params(a) => cmd_params(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Heatmap(a) => cmd_heatmap(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e.chain().any(|c| c.downcast_ref::<manet::Error>().is_some_and(|m| m.is_internal()));
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}
