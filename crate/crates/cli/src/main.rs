//! `drn`: generate synthetic data, train, evaluate, run ablation grids and
//! analyze best locations.
//!
//! Exit status is 0 on success, 1 on usage, configuration or IO errors and
//! 2 when training or inference aborts on a non-finite value.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drn_core::ablation::{run_variant, Architecture, Outcome, Splits};
use drn_core::checkpoint;
use drn_core::config::RunConfig;
use drn_core::data::{gen_synthetic, load_dataset, manifest_path, Dataset, Sample, Split};
use drn_core::eval::{rank_all, report, write_predictions, EvalReport};
use drn_core::heads::QualityMode;
use drn_core::model::{Model, ModelConfig};
use drn_core::parallel::Parallelism;
use drn_core::report::emit_report;
use drn_core::train::{train_three_step, EpochLog, Sampling};
use drn_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;

const CONFIG_FILE: &str = "config.json";
const MODEL_FILE: &str = "model.drnc";

#[derive(Parser, Debug)]
#[command(name = "drn", version, about = "Dense regression network for temporal grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one configuration value, e.g. `train.epochs=[2,1,1]`.
    #[arg(long = "set", value_name = "PATH=JSON")]
    sets: Vec<String>,
    /// Use the published word and LSTM widths.
    #[arg(long)]
    paper_dims: bool,
    /// Run per-sample work on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug, Clone)]
struct Restore {
    /// Training output directory holding `config.json` and `model.drnc`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to load instead of the run's final one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory or manifest; defaults to the configured path.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_serde::<Split>)]
    split: Split,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        noise_std: Option<f32>,
        #[arg(long)]
        temporal_fraction: Option<f32>,
    },
    /// Three-stage training; writes per-stage checkpoints and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Epochs of the three stages, e.g. `20,10,5`.
        #[arg(long, value_parser = parse_epochs)]
        epochs: Option<[usize; 3]>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_parser = parse_serde::<Sampling>)]
        sampling: Option<Sampling>,
        #[arg(long, value_parser = parse_serde::<QualityMode>)]
        quality: Option<QualityMode>,
        #[arg(long, value_parser = parse_serde::<Architecture>)]
        architecture: Option<Architecture>,
    },
    /// Recall grid and JSON-lines predictions of a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        restore: Restore,
    },
    /// Train and evaluate every variant of the declared grid over shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', value_parser = parse_serde::<Sampling>)]
        samplings: Option<Vec<Sampling>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_serde::<QualityMode>)]
        qualities: Option<Vec<QualityMode>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_serde::<Architecture>)]
        architectures: Option<Vec<Architecture>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Where inside the ground truth the best-overlapping box comes from.
    AnalyzeBestLocations {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        restore: Restore,
    },
}

/// Parses a kebab-case value through the type's serde representation.
fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_epochs(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse().map_err(|e| format!("`{x}`: {e}"))).collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected three comma-separated counts, got {}", v.len()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            train,
            val,
            test,
            noise_std,
            temporal_fraction,
        } => {
            let mut cfg = resolve(&common)?;
            let s = &mut cfg.synth;
            s.seed = common.seed.unwrap_or(s.seed);
            s.train = train.unwrap_or(s.train);
            s.val = val.unwrap_or(s.val);
            s.test = test.unwrap_or(s.test);
            s.noise_std = noise_std.unwrap_or(s.noise_std);
            s.temporal_fraction = temporal_fraction.unwrap_or(s.temporal_fraction);
            let out = common.out.unwrap_or(cfg.paths.data);
            let manifest = gen_synthetic(&cfg.synth, &out)?;
            println!("wrote {} samples to {}", manifest.samples.len(), out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            epochs,
            batch_size,
            sampling,
            quality,
            architecture,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
            cfg.train.sampling = sampling.unwrap_or(cfg.train.sampling);
            cfg.model.quality = quality.unwrap_or(cfg.model.quality);
            if let Some(a) = architecture {
                a.apply(&mut cfg.model);
            }
            train(cfg, data, common.out)
        }
        Command::Eval { common, restore } => eval(&common, &restore),
        Command::Ablate {
            common,
            data,
            samplings,
            qualities,
            architectures,
            seeds,
        } => {
            let mut cfg = resolve(&common)?;
            let a = &mut cfg.ablation;
            a.samplings = samplings.unwrap_or(std::mem::take(&mut a.samplings));
            a.qualities = qualities.unwrap_or(std::mem::take(&mut a.qualities));
            a.architectures = architectures.unwrap_or(std::mem::take(&mut a.architectures));
            a.seeds = seeds.unwrap_or(std::mem::take(&mut a.seeds));
            ablate(cfg, data, common.out)
        }
        Command::AnalyzeBestLocations { common, restore } => analyze(&common, &restore),
    }
}

/// Config file, then `--set` overrides, then the shared flags.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !common.sets.is_empty() {
        let mut doc = serde_json::to_value(&cfg).expect("config serializes");
        for s in &common.sets {
            apply_set(&mut doc, s)?;
        }
        cfg = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.paper_dims {
        cfg.model = cfg.model.with_paper_dims();
    }
    if common.sequential {
        cfg.train.parallelism = Parallelism::Sequential;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Sets the value at a dotted path; the value is JSON or a bare string.
fn apply_set(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects PATH=VALUE, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for key in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
    }
    *node = value;
    Ok(())
}

fn data_dir(cfg: &RunConfig, data: &Option<PathBuf>) -> PathBuf {
    manifest_path(data.as_ref().unwrap_or(&cfg.paths.data))
}

/// Takes vocabulary size, segment count and feature width from the dataset.
fn fit_to_dataset(model: &mut ModelConfig, ds: &Dataset) -> Result<()> {
    let i = &mut model.interaction;
    i.vocab_size = ds.vocabulary.len();
    i.segments = ds.segments;
    i.feature_dim = ds.feature_dim;
    i.validate()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|source| Error::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn write(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).map_err(|source| Error::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("stage,epoch,loss_loc,loss_match,loss_quality,loss_total,val_r1_0.5\n");
    for e in log {
        let val = e.val_r1_05.map(|v| format!("{v:.2}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{val}\n",
            e.stage, e.epoch, e.losses.loc, e.losses.matching, e.losses.quality, e.losses.total
        ));
    }
    s
}

fn train(mut cfg: RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let ds = load_dataset(&data_dir(&cfg, &data))?;
    fit_to_dataset(&mut cfg.model, &ds)?;
    let out = out.unwrap_or_else(|| cfg.paths.out.clone());
    create_dir(&out)?;
    write(
        &out.join(CONFIG_FILE),
        serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n",
    )?;
    let (model, store) = Model::new(cfg.model.clone(), cfg.seed)?;
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    log::info!(
        "training on {} samples ({} validation), {} parameters",
        train.len(),
        val.len(),
        store.entries().iter().map(|e| e.value.numel()).sum::<usize>()
    );
    let (state, log) = train_three_step(&model, store, &train, &val, &cfg.train, cfg.seed, |stage, st| {
        checkpoint::save(&out.join(format!("stage{stage}.drnc")), st, &model.cfg)
    })?;
    checkpoint::save(&out.join(MODEL_FILE), &state, &model.cfg)?;
    write(&out.join("metrics.csv"), metrics_csv(&log))?;
    println!("wrote {}", out.join(MODEL_FILE).display());
    Ok(())
}

struct Restored {
    cfg: RunConfig,
    model: Model,
    params: drn_core::params::ParamStore,
    samples: Vec<Sample>,
    segments: usize,
}

fn restore(common: &Common, r: &Restore) -> Result<Restored> {
    let mut cfg = RunConfig::load(&r.run.join(CONFIG_FILE))?;
    if common.config.is_some() || !common.sets.is_empty() {
        log::warn!("model settings come from the run directory; --config and --set apply to evaluation only");
        let over = resolve(common)?;
        cfg.eval = over.eval;
    }
    if common.sequential {
        cfg.train.parallelism = Parallelism::Sequential;
    }
    let ds = load_dataset(&data_dir(&cfg, &r.data))?;
    let (model, template) = Model::new(cfg.model.clone(), cfg.seed)?;
    let i = &model.cfg.interaction;
    if (i.segments, i.feature_dim) != (ds.segments, ds.feature_dim) || i.vocab_size < ds.vocabulary.len() {
        return Err(Error::Config(format!(
            "dataset (K={}, c={}, {} words) does not match the trained model (K={}, c={}, {} words)",
            ds.segments,
            ds.feature_dim,
            ds.vocabulary.len(),
            i.segments,
            i.feature_dim,
            i.vocab_size
        )));
    }
    let ckpt = r.checkpoint.clone().unwrap_or_else(|| r.run.join(MODEL_FILE));
    let state = checkpoint::load(&ckpt, &template, &model.cfg)?;
    let samples = ds.split(r.split);
    if samples.is_empty() {
        return Err(Error::Invalid(format!("split {:?} is empty", r.split)));
    }
    Ok(Restored {
        cfg,
        model,
        params: state.params,
        samples,
        segments: ds.segments,
    })
}

fn format_grid(rep: &EvalReport) -> String {
    rep.grid
        .iter()
        .map(|c| format!("R@{} IoU={} = {:.2}\n", c.n, c.m, c.recall))
        .collect()
}

fn eval(common: &Common, r: &Restore) -> Result<()> {
    let x = restore(common, r)?;
    let par = x.cfg.train.parallelism;
    let ranked = rank_all(&x.model, &x.params, &x.samples, &x.cfg.eval, par)?;
    let rep = report(&ranked, &x.samples, &x.cfg.eval)?;
    print!("{}", format_grid(&rep));
    let temporal: Vec<usize> = (0..x.samples.len()).filter(|&i| x.samples[i].temporal).collect();
    let temporal_rep = if temporal.is_empty() {
        None
    } else {
        let s: Vec<Sample> = temporal.iter().map(|&i| x.samples[i].clone()).collect();
        let rk: Vec<_> = temporal.iter().map(|&i| ranked[i].clone()).collect();
        let t = report(&rk, &s, &x.cfg.eval)?;
        println!("temporal queries ({}):", s.len());
        print!("{}", format_grid(&t));
        Some(t)
    };
    let out = common.out.clone().unwrap_or_else(|| r.run.clone());
    create_dir(&out)?;
    write_predictions(&out.join("predictions.jsonl"), &ranked, &x.samples, x.segments)?;
    let doc = serde_json::json!({ "all": rep, "temporal": temporal_rep });
    write(&out.join("eval.json"), serde_json::to_string_pretty(&doc).expect("report serializes") + "\n")?;
    Ok(())
}

fn analyze(common: &Common, r: &Restore) -> Result<()> {
    let x = restore(common, r)?;
    let rep = drn_core::eval::evaluate(&x.model, &x.params, &x.samples, &x.cfg.eval, x.cfg.train.parallelism)?;
    let h = &rep.histogram;
    let f = h.fractions();
    let bins = ["first third", "middle third", "last third", "outside"];
    let mut csv = String::from("bin,count,fraction\n");
    for (i, name) in bins.iter().enumerate() {
        println!("{name:>12}: {:5} ({:.1}%)", h.counts[i], 100.0 * f[i]);
        csv.push_str(&format!("{name},{},{:.6}\n", h.counts[i], f[i]));
    }
    let out = common.out.clone().unwrap_or_else(|| r.run.clone());
    create_dir(&out)?;
    write(&out.join("best_locations.csv"), csv)?;
    Ok(())
}

fn ablate(mut cfg: RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let ds = load_dataset(&data_dir(&cfg, &data))?;
    fit_to_dataset(&mut cfg.model, &ds)?;
    let (train, val, test) = (ds.split(Split::Train), ds.split(Split::Val), ds.split(Split::Test));
    let splits = Splits {
        train: &train,
        val: &val,
        test: &test,
    };
    let variants = cfg.ablation.variants();
    let seeds = cfg.ablation.seeds.clone();
    let out = out.unwrap_or_else(|| cfg.paths.out.clone());
    create_dir(&out)?;
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut failure: Option<Error> = None;
    for v in &variants {
        for &seed in &seeds {
            log::info!("ablation run {} seed {seed}", v.name());
            match run_variant(*v, seed, &cfg.model, &cfg.train, &cfg.eval, &splits) {
                Ok(o) => outcomes.push(o),
                Err(e) => {
                    log::error!("{} seed {seed}: {e}", v.name());
                    if failure.as_ref().is_none_or(|f| !f.is_numerical()) {
                        failure = Some(e);
                    }
                }
            }
        }
    }
    let methods: Vec<String> = variants.iter().map(|v| v.name()).collect();
    let results: Vec<_> = outcomes.iter().map(Outcome::result).collect();
    let rep = emit_report(&methods, &seeds, &results);
    write(&out.join("ablation.csv"), &rep.csv)?;
    write(&out.join("ablation.md"), &rep.markdown)?;
    let temporal: Vec<_> = outcomes
        .iter()
        .filter_map(|o| {
            o.temporal.as_ref().map(|t| drn_core::report::RunResult {
                method: o.variant.name(),
                seed: o.seed,
                recalls: drn_core::report::METRICS.map(|(n, m)| t.recall(n, m)),
            })
        })
        .collect();
    let trep = emit_report(&methods, &seeds, &temporal);
    write(&out.join("ablation_temporal.csv"), &trep.csv)?;
    write(&out.join("ablation_temporal.md"), &trep.markdown)?;
    print!("{}", rep.markdown);
    if !rep.is_complete() {
        for (m, s) in &rep.missing {
            eprintln!("absent: {m} seed {s}");
        }
        return Err(failure.unwrap_or_else(|| Error::Invalid(format!("{} grid cells absent", rep.missing.len()))));
    }
    Ok(())
}
