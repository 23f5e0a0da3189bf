//! Command-line entry point.
//!
//! Every subcommand resolves its settings from built-in defaults, then an
//! optional `--config` file of `key = value` lines, then `--set key=value`
//! overrides, then dedicated flags. The resolved settings are echoed to
//! `config.json` in the output directory next to `run.json` (command, seed
//! and content hashes of the inputs).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use ggvit_core::check::{check_loss_term, failure_lines, summary_line, term_passed, CheckSettings, LossTerm};
use ggvit_core::model::{ForwardOptions, ModelConfig, Variant};
use ggvit_core::Real;
use serde::Serialize;
use serde_json::Value;

use crate::config::Settings;
use crate::data::{self, Sample, Split, SynthConfig};
use crate::io;
use crate::report;
use crate::trainer::{self, EvalMatrix, ModelSpec, Prepared, QualityTrainConfig, TrainConfig, QUALITY_NAMES};

#[derive(Parser, Debug)]
#[command(name = "ggvit", about = "Globally guided multi-stream face-reenactment detector", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Settings file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Setting override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_pairs: Option<usize>,
        #[arg(long)]
        val_pairs: Option<usize>,
        #[arg(long)]
        test_pairs: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Crop, resample and split every manifest image into its five streams.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the quality classifier on the train split.
    TrainQuality {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Quality-classifier checkpoint (needed when the quality block is on).
        #[arg(long)]
        quality: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// full, base, iqb, fab, no-guidance or a variant name.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict training and validation to one quality level.
        #[arg(long)]
        train_quality: Option<usize>,
        /// f32 or f64.
        #[arg(long)]
        dtype: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a detector checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Restrict to one quality level.
        #[arg(long)]
        quality_level: Option<usize>,
        /// Expected preset; a mismatch with the checkpoint is an error.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-quality accuracy matrix.
    Matrix {
        /// One checkpoint per training quality, comma separated.
        #[arg(long, value_delimiter = ',')]
        ckpts: Vec<PathBuf>,
        /// Test quality levels, comma separated (q0,q1,q2).
        #[arg(long, value_delimiter = ',')]
        tests: Vec<String>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Share of the fusion tensor carried by each stream.
    Proportions {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every loss term.
    Gradcheck {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Render matrix and proportions CSVs as text tables and an SVG heatmap.
    Report {
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        proportions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 success, 1 validation or runtime failure, 2 usage.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Layered settings with a record of every resolved value.
struct Resolver {
    settings: Settings,
    resolved: BTreeMap<String, Value>,
}

impl Resolver {
    fn new(common: &Common) -> Result<Self> {
        let mut settings = match &common.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        settings.apply_overrides(&common.set)?;
        Ok(Resolver { settings, resolved: BTreeMap::new() })
    }

    fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Serialize + Clone,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.settings.get(key)?.unwrap_or(default),
        };
        self.resolved.insert(key.to_string(), serde_json::to_value(v.clone())?);
        Ok(v)
    }

    fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Serialize + Clone,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.settings.get(key)?,
        };
        self.resolved.insert(key.to_string(), serde_json::to_value(v.clone())?);
        Ok(v)
    }

    /// Fails on settings that no resolved key consumed.
    fn finish(self) -> Result<BTreeMap<String, Value>> {
        let known: Vec<&str> = self.resolved.keys().map(String::as_str).collect();
        let unknown = self.settings.unknown_keys(&known);
        ensure!(unknown.is_empty(), "unknown setting(s): {}", unknown.join(", "));
        Ok(self.resolved)
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    version: &'static str,
}

fn write_run(out: &Path, command: &str, config: &BTreeMap<String, Value>, seed: Option<u64>, inputs: BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_json(&out.join("config.json"), config)?;
    io::write_json(&out.join("run.json"), &RunInfo { command, seed, inputs, version: env!("CARGO_PKG_VERSION") })
}

/// SHA-256 over the manifest bytes and every referenced image.
fn manifest_hash(path: &Path, samples: &[Sample]) -> Result<String> {
    let mut parts = vec![io::sha256_file(path)?];
    for s in samples {
        parts.push(io::sha256_file(&s.path)?);
    }
    Ok(io::sha256_hex(parts.join("\n").as_bytes()))
}

fn parse_quality_name(s: &str) -> Result<usize> {
    QUALITY_NAMES
        .iter()
        .position(|&n| n == s)
        .or_else(|| s.parse().ok().filter(|&q: &usize| q < QUALITY_NAMES.len()))
        .with_context(|| format!("unknown quality level {s:?} (expected q0, q1 or q2)"))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, seed, train_pairs, val_pairs, test_pairs, side, common } => {
            let mut r = Resolver::new(&common)?;
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                seed: r.get("seed", seed, d.seed)?,
                side: r.get("side", side, d.side)?,
                train_pairs: r.get("train_pairs", train_pairs, d.train_pairs)?,
                val_pairs: r.get("val_pairs", val_pairs, d.val_pairs)?,
                test_pairs: r.get("test_pairs", test_pairs, d.test_pairs)?,
                patch_min: r.get("patch_min", None, d.patch_min)?,
                patch_max: r.get("patch_max", None, d.patch_max)?,
                noise: r.get("noise", None, d.noise)?,
                stripe_amplitude: r.get("stripe_amplitude", None, d.stripe_amplitude)?,
                blur_sigma: [0.0, r.get("blur1", None, d.blur_sigma[1])?, r.get("blur2", None, d.blur_sigma[2])?],
                quant_levels: [0, r.get("levels1", None, d.quant_levels[1])?, r.get("levels2", None, d.quant_levels[2])?],
            };
            let config = r.finish()?;
            let records = data::synth_generate(&cfg, &out)?;
            write_run(&out, "synth", &config, Some(cfg.seed), BTreeMap::new())?;
            let samples = data::load_manifest(&out.join("manifest.jsonl"))?;
            print!("{}", data::format_counts(&samples));
            println!("wrote {} images to {}", records.len(), out.display());
            Ok(())
        }
        Command::Preprocess { manifest, out, size, common } => {
            let mut r = Resolver::new(&common)?;
            let size = r.get("size", size, ModelConfig::tiny().vit.image_size)?;
            let config = r.finish()?;
            let samples = data::load_manifest(&manifest)?;
            let dir = out.join("streams");
            fs::create_dir_all(&dir)?;
            let mut index = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let set = data::load_streams(s, size)?;
                let stacked = ggvit_core::Tensor::stack(&(0..5).map(|k| set.stream(k).clone()).collect::<Vec<_>>())?;
                let name = format!("{i:05}.ggt");
                io::write_ggt(&dir.join(&name), &stacked)?;
                index.push(serde_json::json!({
                    "streams": format!("streams/{name}"),
                    "source": s.path.display().to_string(),
                    "label": s.label,
                    "quality": s.quality,
                    "split": s.split.name(),
                }));
            }
            trainer::write_jsonl(&out.join("index.jsonl"), &index)?;
            let inputs = BTreeMap::from([("manifest".to_string(), manifest_hash(&manifest, &samples)?)]);
            write_run(&out, "preprocess", &config, None, inputs)?;
            println!("preprocessed {} samples into {}", samples.len(), dir.display());
            Ok(())
        }
        Command::TrainQuality { manifest, out, epochs, seed, size, common } => {
            let mut r = Resolver::new(&common)?;
            let d = QualityTrainConfig::default();
            let cfg = QualityTrainConfig {
                epochs: r.get("epochs", epochs, d.epochs)?,
                batch_size: r.get("batch_size", None, d.batch_size)?,
                lr: r.get("lr", None, d.lr)?,
                momentum: r.get("momentum", None, d.momentum)?,
                seed: r.get("seed", seed, d.seed)?,
            };
            let size = r.get("size", size, ModelConfig::tiny().vit.image_size)?;
            let config = r.finish()?;
            let samples = data::load_manifest(&manifest)?;
            let train = Prepared::<f32>::load(&data::select(&samples, Split::Train, None), size)?;
            let held = Prepared::<f32>::load(&data::select(&samples, Split::Test, None), size)?;
            let (qc, history) = trainer::train_quality_classifier(&train, size, &cfg)?;
            let held_acc = if held.is_empty() {
                None
            } else {
                Some(trainer::accuracy(&trainer::quality_predictions(&qc, &held)?, &held.qualities)?)
            };
            trainer::save_quality(&out.join("checkpoint"), &qc)?;
            io::write_json(&out.join("metrics.json"), &serde_json::json!({ "train_acc": history, "held_out_acc": held_acc }))?;
            let inputs = BTreeMap::from([("manifest".to_string(), manifest_hash(&manifest, &samples)?)]);
            write_run(&out, "train-quality", &config, Some(cfg.seed), inputs)?;
            println!("quality classifier: train {:.2}%, held-out {}", history.last().copied().unwrap_or(0.0), held_acc.map_or("n/a".into(), |a| format!("{a:.2}%")));
            Ok(())
        }
        Command::Train { manifest, out, quality, preset, variant, lambda, epochs, batch_size, lr, seed, train_quality, dtype, common } => {
            let mut r = Resolver::new(&common)?;
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                epochs: r.get("epochs", epochs, d.epochs)?,
                batch_size: r.get("batch_size", batch_size, d.batch_size)?,
                lr: r.get("lr", lr, d.lr)?,
                momentum: r.get("momentum", None, d.momentum)?,
                weight_decay: r.get("weight_decay", None, d.weight_decay)?,
                seed: r.get("seed", seed, d.seed)?,
                model: ModelSpec {
                    preset: r.get("preset", preset, d.model.preset)?,
                    variant: Variant::parse(&r.get("variant", variant, "full".to_string())?)?.name(),
                    lambda: r.get("lambda", lambda, d.model.lambda)?,
                },
                stop_train_acc: r.opt("stop_train_acc", None)?,
                stop_val_acc: r.opt("stop_val_acc", None)?,
            };
            let train_quality = r.opt("train_quality", train_quality)?;
            let dtype = r.get("dtype", dtype, "f32".to_string())?;
            let config = r.finish()?;
            cfg.validate()?;
            match dtype.as_str() {
                "f32" => train_cmd::<f32>(&cfg, &manifest, &out, quality.as_deref(), train_quality, &config),
                "f64" => train_cmd::<f64>(&cfg, &manifest, &out, quality.as_deref(), train_quality, &config),
                other => bail!("dtype must be f32 or f64, got {other:?}"),
            }
        }
        Command::Eval { ckpt, manifest, out, split, quality_level, preset, common } => {
            let mut r = Resolver::new(&common)?;
            let split = Split::parse(&r.get("split", split, "test".to_string())?)?;
            let level = r.opt("quality_level", quality_level)?;
            let preset = r.opt("preset", preset)?;
            let config = r.finish()?;
            match io::read_checkpoint_index(&ckpt)?.dtype.as_str() {
                "f64" => eval_cmd::<f64>(&ckpt, &manifest, &out, split, level, preset.as_deref(), &config),
                _ => eval_cmd::<f32>(&ckpt, &manifest, &out, split, level, preset.as_deref(), &config),
            }
        }
        Command::Matrix { ckpts, tests, manifest, out, split, common } => {
            let mut r = Resolver::new(&common)?;
            let split = Split::parse(&r.get("split", split, "test".to_string())?)?;
            let config = r.finish()?;
            ensure!(!ckpts.is_empty(), "--ckpts needs at least one checkpoint");
            ensure!(ckpts.len() <= QUALITY_NAMES.len(), "at most {} checkpoints", QUALITY_NAMES.len());
            let tests = tests.iter().map(|t| parse_quality_name(t)).collect::<Result<Vec<_>>>()?;
            ensure!(!tests.is_empty(), "--tests needs at least one quality level");
            matrix_cmd(&ckpts, &tests, &manifest, &out, split, &config)
        }
        Command::Proportions { ckpt, manifest, out, split, common } => {
            let mut r = Resolver::new(&common)?;
            let split = Split::parse(&r.get("split", split, "test".to_string())?)?;
            let config = r.finish()?;
            let det = trainer::load_detector::<f64>(&ckpt)?;
            let samples = data::load_manifest(&manifest)?;
            let data = prepared_for(&det, &data::select(&samples, split, None))?;
            let res = trainer::evaluate(&det.model, &data, trainer::eval_threads())?;
            let p = trainer::proportions(&res)?;
            let rows = vec![(det.settings.model.variant.clone(), p)];
            fs::create_dir_all(&out)?;
            fs::write(out.join("proportions.csv"), trainer::proportions_csv(&rows))?;
            let inputs = BTreeMap::from([
                ("checkpoint".to_string(), io::hash_dir(&ckpt)?),
                ("manifest".to_string(), manifest_hash(&manifest, &samples)?),
            ]);
            write_run(&out, "proportions", &config, None, inputs)?;
            print!("{}", report::proportions_table(&rows));
            Ok(())
        }
        Command::Gradcheck { preset, seed, common } => {
            let mut r = Resolver::new(&common)?;
            let d = CheckSettings::default();
            let preset = r.get("preset", preset, "tiny".to_string())?;
            let settings = CheckSettings {
                seed: r.get("seed", seed, d.seed)?,
                batch: r.get("batch", None, d.batch)?,
                per_param: r.get("per_param", None, d.per_param)?,
                candidates: r.get("candidates", None, d.candidates)?,
                step: r.get("step", None, d.step)?,
                tol: r.get("tol", None, d.tol)?,
            };
            r.finish()?;
            let cfg = ModelConfig::preset(&preset)?;
            let mut all = true;
            for term in LossTerm::ALL {
                let t0 = Instant::now();
                let report = check_loss_term(&cfg, term, &settings)?;
                let ok = term_passed(&report);
                println!("{}", format!("{} ({:.1}s)", summary_line(term, &report), t0.elapsed().as_secs_f64()));
                for line in failure_lines(&report) {
                    println!("{line}");
                }
                all &= ok;
            }
            ensure!(all, "gradient check failed");
            Ok(())
        }
        Command::Report { matrix, proportions, out, common } => {
            let r = Resolver::new(&common)?;
            let config = r.finish()?;
            ensure!(matrix.is_some() || proportions.is_some(), "nothing to report: pass --matrix and/or --proportions");
            fs::create_dir_all(&out)?;
            let mut text = String::new();
            let mut inputs = BTreeMap::new();
            if let Some(p) = &matrix {
                let m = EvalMatrix::from_csv(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
                text.push_str("Accuracy (%) by train quality (rows) and test quality (columns), per image\n");
                text.push_str(&report::matrix_table(&m));
                fs::write(out.join("matrix.svg"), report::matrix_svg(&m))?;
                inputs.insert("matrix".to_string(), io::sha256_file(p)?);
            }
            if let Some(p) = &proportions {
                let rows = read_proportions(p)?;
                if !text.is_empty() {
                    text.push('\n');
                }
                text.push_str("Share (%) of the fusion tensor per stream\n");
                text.push_str(&report::proportions_table(&rows));
                inputs.insert("proportions".to_string(), io::sha256_file(p)?);
            }
            fs::write(out.join("report.txt"), &text)?;
            write_run(&out, "report", &config, None, inputs)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn read_proportions(path: &Path) -> Result<Vec<(String, [f64; 5])>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut parts = line.split(',');
        let name = parts.next().unwrap_or_default().to_string();
        let vals = parts.map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().with_context(|| format!("line {}", i + 1))?;
        let vals: [f64; 5] = vals.try_into().map_err(|_| anyhow::anyhow!("line {}: expected 5 values", i + 1))?;
        rows.push((name, vals));
    }
    Ok(rows)
}

/// Loads samples and attaches quality scalars from the detector's bundled
/// classifier when it has one.
fn prepared_for<T: Real>(det: &trainer::LoadedDetector<T>, samples: &[Sample]) -> Result<Prepared<T>> {
    ensure!(!samples.is_empty(), "no samples selected");
    let mut data = Prepared::load(samples, det.model.config.vit.image_size)?;
    if let Some(qc) = &det.quality {
        data.score(qc)?;
    }
    Ok(data)
}

fn train_cmd<T: Real>(
    cfg: &TrainConfig,
    manifest: &Path,
    out: &Path,
    quality: Option<&Path>,
    train_quality: Option<usize>,
    config: &BTreeMap<String, Value>,
) -> Result<()> {
    let mcfg = cfg.model.config()?;
    let samples = data::load_manifest(manifest)?;
    let size = mcfg.vit.image_size;
    let mut train = Prepared::<T>::load(&data::select(&samples, Split::Train, train_quality), size)?;
    let val_samples = data::select(&samples, Split::Val, train_quality);
    let mut val = Prepared::<T>::load(&val_samples, size)?;
    let qc = match (mcfg.variant.iqb, quality) {
        (true, Some(p)) => Some(trainer::load_quality::<T>(p)?),
        (true, None) => bail!("variant {} uses the quality block; pass --quality <checkpoint>", mcfg.variant.name()),
        (false, _) => None,
    };
    if let Some(qc) = &qc {
        ensure!(qc.config.image_size == size, "quality classifier expects {} px images, model uses {size}", qc.config.image_size);
        train.score(qc)?;
        val.score(qc)?;
    }
    let t0 = Instant::now();
    let print = &mut |e: &trainer::EpochLog| {
        println!(
            "epoch {:>2}  loss {:.4}  train {:.2}%  val {}",
            e.epoch,
            e.mean_total,
            e.train_acc,
            e.val_acc.map_or("n/a".into(), |v| format!("{v:.2}%"))
        );
    };
    let val = (!val.is_empty()).then_some(&val);
    let outcome = trainer::train_with(cfg, &train, val, ForwardOptions::default(), print)?;
    fs::create_dir_all(out)?;
    trainer::save_detector(&out.join("checkpoint"), &cfg.model, &outcome.best, qc.as_ref())?;
    trainer::save_detector(&out.join("last"), &cfg.model, &outcome.last, qc.as_ref())?;
    trainer::write_jsonl(&out.join("log.jsonl"), &outcome.steps)?;
    trainer::write_jsonl(&out.join("epochs.jsonl"), &outcome.epochs)?;
    let mut inputs = BTreeMap::from([("manifest".to_string(), manifest_hash(manifest, &samples)?)]);
    if let Some(p) = quality {
        inputs.insert("quality".to_string(), io::hash_dir(p)?);
    }
    write_run(out, "train", config, Some(cfg.seed), inputs)?;
    println!("best epoch {} in {:.1}s; checkpoint at {}", outcome.best_epoch, t0.elapsed().as_secs_f64(), out.join("checkpoint").display());
    Ok(())
}

fn eval_cmd<T: Real>(
    ckpt: &Path,
    manifest: &Path,
    out: &Path,
    split: Split,
    level: Option<usize>,
    preset: Option<&str>,
    config: &BTreeMap<String, Value>,
) -> Result<()> {
    let det = trainer::load_detector::<T>(ckpt)?;
    if let Some(p) = preset {
        ensure!(p == det.settings.model.preset, "checkpoint preset {} does not match requested preset {p}", det.settings.model.preset);
    }
    let samples = data::load_manifest(manifest)?;
    let selected = data::select(&samples, split, level);
    let data = prepared_for(&det, &selected)?;
    let res = trainer::evaluate(&det.model, &data, trainer::eval_threads())?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("path,label,quality,prediction,p_real,p_fake\n");
    for (s, (pred, p)) in selected.iter().zip(res.predictions.iter().zip(&res.probs)) {
        csv.push_str(&format!("{},{},{},{pred},{:.6},{:.6}\n", s.path.display(), s.label, s.quality, p[0], p[1]));
    }
    fs::write(out.join("predictions.csv"), csv)?;
    if !res.fusion.is_empty() {
        trainer::write_jsonl(&out.join("fusion.jsonl"), &res.fusion)?;
    }
    io::write_json(&out.join("metrics.json"), &serde_json::json!({ "accuracy": res.accuracy, "n": selected.len(), "variant": det.settings.model.variant }))?;
    let inputs = BTreeMap::from([
        ("checkpoint".to_string(), io::hash_dir(ckpt)?),
        ("manifest".to_string(), manifest_hash(manifest, &samples)?),
    ]);
    write_run(out, "eval", config, None, inputs)?;
    println!("accuracy {:.2}% on {} images ({})", res.accuracy, selected.len(), det.settings.model.variant);
    Ok(())
}

fn matrix_cmd(ckpts: &[PathBuf], tests: &[usize], manifest: &Path, out: &Path, split: Split, config: &BTreeMap<String, Value>) -> Result<()> {
    let samples = data::load_manifest(manifest)?;
    let mut rows = Vec::with_capacity(ckpts.len());
    let mut inputs = BTreeMap::from([("manifest".to_string(), manifest_hash(manifest, &samples)?)]);
    for (i, ck) in ckpts.iter().enumerate() {
        let ck = &io::resolve_checkpoint(ck);
        ensure!(ck.join("index.json").is_file(), "missing checkpoint {} for train quality {}", ck.display(), QUALITY_NAMES[i]);
        let det = trainer::load_detector::<f64>(ck)?;
        let mut row = Vec::with_capacity(tests.len());
        for &q in tests {
            let data = prepared_for(&det, &data::select(&samples, split, Some(q)))
                .with_context(|| format!("cell {}/{}", QUALITY_NAMES[i], QUALITY_NAMES[q]))?;
            row.push(trainer::evaluate(&det.model, &data, trainer::eval_threads())?.accuracy);
        }
        rows.push(row);
        inputs.insert(format!("checkpoint_{}", QUALITY_NAMES[i]), io::hash_dir(ck)?);
    }
    let m = EvalMatrix { accuracy: rows };
    fs::create_dir_all(out)?;
    fs::write(out.join("matrix.csv"), m.to_csv())?;
    io::write_json(&out.join("matrix.json"), &m)?;
    write_run(out, "matrix", config, None, inputs)?;
    print!("{}", report::matrix_table(&m));
    Ok(())
}
