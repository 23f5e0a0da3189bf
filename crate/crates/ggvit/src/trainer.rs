//! Quality-classifier and detector training, evaluation, the cross-quality
//! matrix and stream proportions.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ggvit_core::fusion::{stream_proportions, STREAMS};
use ggvit_core::model::{forward, loss, ForwardOptions, Ggvit, ModelConfig, StreamBatch, Variant};
use ggvit_core::optim::{Sgd, SgdConfig};
use ggvit_core::preprocess::StreamSet;
use ggvit_core::quality::{quality_logits, log_softmax_nll, QualityClassifier, QualityConfig};
use ggvit_core::vit::argmax;
use ggvit_core::{Bound, ParamSet, Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{batch_order, load_streams, Sample, QUALITY_LEVELS};
use crate::io;

/// Preprocessed samples held in memory.
#[derive(Clone, Debug)]
pub struct Prepared<T: Real> {
    pub sets: Vec<StreamSet<T>>,
    pub labels: Vec<usize>,
    pub qualities: Vec<usize>,
    /// Quality scalars from the frozen classifier; empty without one.
    pub scalars: Vec<T>,
}

impl<T: Real> Prepared<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn load(samples: &[Sample], size: usize) -> Result<Self> {
        let sets = samples.iter().map(|s| Ok(load_streams(s, size)?.cast())).collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            sets,
            labels: samples.iter().map(|s| s.label).collect(),
            qualities: samples.iter().map(|s| s.quality).collect(),
            scalars: Vec::new(),
        })
    }

    /// Scores every whole-face stream with the frozen classifier.
    pub fn score(&mut self, qc: &QualityClassifier<T>) -> Result<()> {
        let mut scalars = Vec::with_capacity(self.len());
        for chunk in (0..self.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
            scalars.extend(qc.scalars(&self.stream_batch(0, chunk)?)?);
        }
        self.scalars = scalars;
        Ok(())
    }

    fn stream_batch(&self, k: usize, idx: &[usize]) -> Result<Tensor<T>> {
        Ok(Tensor::stack(&idx.iter().map(|&i| self.sets[i].stream(k).clone()).collect::<Vec<_>>())?)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<StreamBatch<T>> {
        let streams: Vec<Tensor<T>> = (0..STREAMS).map(|k| self.stream_batch(k, idx)).collect::<Result<_>>()?;
        Ok(StreamBatch {
            streams: streams.try_into().expect("five streams"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            quality: if self.scalars.is_empty() { Vec::new() } else { idx.iter().map(|&i| self.scalars[i]).collect() },
        })
    }

    /// The subset at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Prepared {
            sets: idx.iter().map(|&i| self.sets[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            qualities: idx.iter().map(|&i| self.qualities[i]).collect(),
            scalars: if self.scalars.is_empty() { Vec::new() } else { idx.iter().map(|&i| self.scalars[i]).collect() },
        }
    }

    /// Indices whose quality level is `q`.
    pub fn at_quality(&self, q: usize) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.qualities[i] == q).collect();
        self.subset(&idx)
    }
}

/// Samples per evaluation work unit. Fixed so results do not depend on the
/// thread count.
pub const EVAL_CHUNK: usize = 16;

/// Evaluation workers: `GGVIT_THREADS` if set, else the available cores.
pub fn eval_threads() -> usize {
    std::env::var("GGVIT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over fixed chunks of `0..n` on up to `threads` workers and
/// returns the per-chunk results in index order.
fn par_chunks<R: Send>(n: usize, threads: usize, f: impl Fn(&[usize]) -> Result<R> + Sync) -> Result<Vec<R>> {
    let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let threads = threads.clamp(1, chunks.len().max(1));
    if threads == 1 {
        return chunks.iter().map(|c| f(c)).collect();
    }
    let mut slots: Vec<Option<Result<R>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (chunks, f) = (&chunks, &f);
                s.spawn(move || {
                    (t..chunks.len()).step_by(threads).map(|i| (i, f(&chunks[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every chunk evaluated")).collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    ensure!(!labels.is_empty() && predictions.len() == labels.len(), "accuracy needs matching nonempty lists");
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for QualityTrainConfig {
    fn default() -> Self {
        QualityTrainConfig { epochs: 20, batch_size: 8, lr: 0.03, momentum: 0.9, seed: 0 }
    }
}

/// Class predictions of the quality classifier on whole-face streams.
pub fn quality_predictions<T: Real>(qc: &QualityClassifier<T>, data: &Prepared<T>) -> Result<Vec<usize>> {
    let per = par_chunks(data.len(), eval_threads(), |idx| {
        let p = qc.probabilities(&data.stream_batch(0, idx)?)?;
        Ok(p.data().chunks_exact(qc.config.n_classes).map(argmax).collect::<Vec<_>>())
    })?;
    Ok(per.concat())
}

/// Trains the quality classifier on whole-face streams labelled by quality
/// level. Returns the classifier and its per-epoch training accuracy.
pub fn train_quality_classifier<T: Real>(
    data: &Prepared<T>,
    size: usize,
    cfg: &QualityTrainConfig,
) -> Result<(QualityClassifier<T>, Vec<f64>)> {
    ensure!(cfg.epochs >= 1 && cfg.batch_size >= 1, "epochs and batch size must be at least 1");
    let mut present = [false; QUALITY_LEVELS];
    for &q in &data.qualities {
        present[q] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        bail!("quality classifier needs at least 2 quality classes in its training set");
    }
    let mut qc = QualityClassifier::<T>::new(QualityConfig::new(size), cfg.seed)?;
    let mut opt = Sgd::new(SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: 0.0 })?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut hits = 0;
        for idx in batch_order(data.len(), cfg.batch_size, cfg.seed, epoch, true)? {
            let labels: Vec<usize> = idx.iter().map(|&i| data.qualities[i]).collect();
            let mut tape = Tape::new();
            let vars = tape.bind(&qc.params)?;
            let x = tape.constant(data.stream_batch(0, &idx)?)?;
            let z = quality_logits(&mut tape, Bound::new(&vars), &qc.layout, &qc.config, x)?;
            hits += tape.value(z).data().chunks_exact(qc.config.n_classes).map(argmax).zip(&labels).filter(|(p, l)| p == *l).count();
            let nll = log_softmax_nll(&mut tape, z, &labels)?;
            let mean = tape.scale(nll, T::ONE / T::from_usize(idx.len()))?;
            let l = tape.value(mean).item()?;
            ensure!(l.is_finite(), "quality classifier: non-finite loss at epoch {epoch}");
            let grads = tape.backward(mean)?.collect(&vars)?;
            opt.step(&mut qc.params, &grads)?;
        }
        history.push(100.0 * hits as f64 / data.len() as f64);
    }
    Ok((qc, history))
}

/// What a detector checkpoint needs to rebuild its configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub preset: String,
    pub variant: String,
    pub lambda: f64,
}

impl ModelSpec {
    pub fn config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        cfg.variant = Variant::parse(&self.variant)?;
        cfg.lambda = self.lambda;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub model: ModelSpec,
    /// Stop once an epoch's running training accuracy and validation
    /// accuracy both reach these percentages.
    pub stop_train_acc: Option<f64>,
    pub stop_val_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            model: ModelSpec { preset: "tiny".into(), variant: Variant::FULL.name(), lambda: 0.1 },
            stop_train_acc: None,
            stop_val_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.model.lambda >= 0.0, "lambda must be nonnegative");
        self.model.config()?;
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_vit: f64,
    pub l_lmc: Option<f64>,
    pub l_fusion: Option<f64>,
    pub total: f64,
    pub clamp_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub mean_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub last: Ggvit<T>,
    /// Parameters from the epoch with the best validation accuracy (the last
    /// epoch without a validation set).
    pub best: Ggvit<T>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// One SGD step on a batch: forward, loss, backward of `total / B`, update.
pub fn train_step<T: Real>(
    model: &mut Ggvit<T>,
    opt: &mut Sgd<T>,
    batch: &StreamBatch<T>,
    opts: ForwardOptions,
    step: usize,
) -> Result<(StepLog, Vec<usize>)> {
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params)?;
    let p = Bound::new(&vars);
    let out = forward(&mut tape, p, &model.layout, &model.config, batch, opts)
        .with_context(|| format!("step {step}: forward"))?;
    let lv = loss(&mut tape, p, &model.layout, &model.config, &out, &batch.labels)
        .with_context(|| format!("step {step}: loss"))?;
    let get = |v| tape.value(v).item().map(|x: T| x.to_f64());
    let log = StepLog {
        step,
        l_vit: get(lv.l_vit)?,
        l_lmc: lv.l_lmc.map(get).transpose()?,
        l_fusion: lv.l_fusion.map(get).transpose()?,
        total: get(lv.total)?,
        clamp_count: tape.clamp_count(),
    };
    if !log.total.is_finite() {
        bail!(
            "step {step}: non-finite loss (l_vit={}, l_lmc={:?}, l_fusion={:?}, total={}, clamp_count={})",
            log.l_vit,
            log.l_lmc,
            log.l_fusion,
            log.total,
            log.clamp_count
        );
    }
    let preds = tape.value(out.final_probs).data().chunks_exact(2).map(argmax).collect();
    let root = tape.scale(lv.total, T::ONE / T::from_usize(batch.len()))?;
    let grads = tape.backward(root)?.collect(&vars)?;
    opt.step(&mut model.params, &grads)?;
    Ok((log, preds))
}

/// Trains a detector. `train` and `val` must carry quality scalars when the
/// quality block is on.
pub fn train<T: Real>(cfg: &TrainConfig, train_set: &Prepared<T>, val_set: Option<&Prepared<T>>) -> Result<TrainOutcome<T>> {
    train_with(cfg, train_set, val_set, ForwardOptions::default(), &mut |_| {})
}

pub fn train_with<T: Real>(
    cfg: &TrainConfig,
    train_set: &Prepared<T>,
    val_set: Option<&Prepared<T>>,
    opts: ForwardOptions,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    ensure!(!train_set.is_empty(), "empty training set");
    let mcfg = cfg.model.config()?;
    ensure!(
        !mcfg.variant.iqb || train_set.scalars.len() == train_set.len(),
        "the quality block needs quality scalars; train or load a quality classifier first"
    );
    let mut model = Ggvit::<T>::new(mcfg, cfg.seed)?;
    let mut opt = Sgd::new(cfg.sgd())?;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = model.clone();
    let mut best_val: Option<f64> = None;
    let mut best_epoch = 0;
    for epoch in 0..cfg.epochs {
        let mut hits = 0;
        let mut sum_total = 0.0;
        let batches = batch_order(train_set.len(), cfg.batch_size, cfg.seed, epoch, true)?;
        for idx in &batches {
            let batch = train_set.batch(idx)?;
            let (log, preds) = train_step(&mut model, &mut opt, &batch, opts, steps.len())?;
            hits += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            sum_total += log.total;
            steps.push(log);
        }
        let train_acc = 100.0 * hits as f64 / train_set.len() as f64;
        let val_acc = match val_set {
            Some(v) => Some(evaluate(&model, v, eval_threads())?.accuracy),
            None => None,
        };
        let log = EpochLog { epoch, train_acc, val_acc, mean_total: sum_total / batches.len() as f64 };
        on_epoch(&log);
        epochs.push(log);
        let improved = match (val_acc, best_val) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = model.clone();
            best_val = val_acc;
            best_epoch = epoch;
        }
        let train_ok = cfg.stop_train_acc.is_some_and(|t| train_acc >= t);
        let val_ok = match (cfg.stop_val_acc, val_acc) {
            (Some(t), Some(v)) => v >= t,
            (None, _) => true,
            (Some(_), None) => false,
        };
        if cfg.stop_train_acc.is_some() && train_ok && val_ok {
            break;
        }
    }
    Ok(TrainOutcome { last: model, best, best_epoch, best_val, steps, epochs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Final class probabilities per sample.
    pub probs: Vec<[f64; 2]>,
    /// Fusion tensors per sample (10 values) when the fusion block is on.
    pub fusion: Vec<Vec<f64>>,
}

/// Per-image accuracy of the final prediction.
pub fn evaluate<T: Real>(model: &Ggvit<T>, data: &Prepared<T>, threads: usize) -> Result<EvalResult> {
    ensure!(!data.is_empty(), "empty evaluation set");
    ensure!(
        !model.config.variant.iqb || data.scalars.len() == data.len(),
        "the quality block needs quality scalars for evaluation"
    );
    let per = par_chunks(data.len(), threads, |idx| {
        let inf = model.infer(&data.batch(idx)?)?;
        let probs: Vec<[f64; 2]> = inf.final_probs.data().chunks_exact(2).map(|c| [c[0].to_f64(), c[1].to_f64()]).collect();
        let fusion: Vec<Vec<f64>> = match &inf.fusion {
            Some(f) => f.data().chunks_exact(2 * STREAMS).map(|c| c.iter().map(|v| v.to_f64()).collect()).collect(),
            None => Vec::new(),
        };
        Ok((probs, fusion))
    })?;
    let mut probs = Vec::with_capacity(data.len());
    let mut fusion = Vec::new();
    for (p, f) in per {
        probs.extend(p);
        fusion.extend(f);
    }
    let predictions: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(EvalResult { accuracy: accuracy(&predictions, &data.labels)?, predictions, probs, fusion })
}

pub const QUALITY_NAMES: [&str; QUALITY_LEVELS] = ["q0", "q1", "q2"];

/// Accuracy in percent for every (train quality, test quality) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub accuracy: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train\\test");
        for name in QUALITY_NAMES.iter().take(self.accuracy.first().map_or(0, Vec::len)) {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
        for (i, row) in self.accuracy.iter().enumerate() {
            s.push_str(QUALITY_NAMES[i]);
            for v in row {
                let _ = write!(s, ",{v:.2}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let vals = line
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<f64>().with_context(|| format!("matrix line {}", i + 1)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(vals);
        }
        Ok(EvalMatrix { accuracy: rows })
    }
}

/// Evaluates the checkpoint trained at quality `i` on the test set of quality
/// `j` for every pair. A missing checkpoint fails naming its cells.
pub fn eval_matrix<T: Real>(models: &[Option<&Ggvit<T>>], tests: &[&Prepared<T>], threads: usize) -> Result<EvalMatrix> {
    let mut accuracy = Vec::with_capacity(models.len());
    for (i, m) in models.iter().enumerate() {
        let Some(m) = m else {
            bail!("no checkpoint for train quality {} (cells {}/*)", QUALITY_NAMES[i], QUALITY_NAMES[i]);
        };
        let row = tests
            .iter()
            .enumerate()
            .map(|(j, t)| {
                evaluate(m, t, threads)
                    .map(|r| r.accuracy)
                    .with_context(|| format!("cell {}/{}", QUALITY_NAMES[i], QUALITY_NAMES[j]))
            })
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(row);
    }
    Ok(EvalMatrix { accuracy })
}

pub const PROPORTION_COLUMNS: [&str; STREAMS] = ["X0", "X1", "X2", "X3", "X4"];

pub fn proportions_csv(rows: &[(String, [f64; STREAMS])]) -> String {
    let mut s = format!("model,{}\n", PROPORTION_COLUMNS.join(","));
    for (name, p) in rows {
        let _ = writeln!(s, "{name},{}", p.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(","));
    }
    s
}

/// Stream proportions of an evaluation's fusion tensors.
pub fn proportions(result: &EvalResult) -> Result<[f64; STREAMS]> {
    ensure!(!result.fusion.is_empty(), "no fusion tensors; the fusion block is off");
    Ok(stream_proportions(&result.fusion)?)
}

pub const DETECTOR_KIND: &str = "detector";
pub const QUALITY_KIND: &str = "quality";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub model: ModelSpec,
    /// Image side of the bundled quality classifier, when present.
    pub quality_image_size: Option<usize>,
}

/// Saves detector parameters together with the frozen quality classifier it
/// was trained with.
pub fn save_detector<T: Real>(dir: &Path, spec: &ModelSpec, model: &Ggvit<T>, qc: Option<&QualityClassifier<T>>) -> Result<()> {
    let mut all = model.params.clone();
    if let Some(qc) = qc {
        for (name, t) in qc.params.iter() {
            all.add(name, t.clone())?;
        }
    }
    let settings = DetectorSettings { model: spec.clone(), quality_image_size: qc.map(|q| q.config.image_size) };
    io::save_checkpoint(dir, DETECTOR_KIND, &settings, &all)
}

pub struct LoadedDetector<T: Real> {
    pub settings: DetectorSettings,
    pub model: Ggvit<T>,
    pub quality: Option<QualityClassifier<T>>,
}

pub fn load_detector<T: Real>(dir: &Path) -> Result<LoadedDetector<T>> {
    let (index, all) = io::load_checkpoint::<T>(dir, DETECTOR_KIND)?;
    let settings: DetectorSettings = serde_json::from_value(index.settings).context("detector settings")?;
    let prefix = format!("{}.", QualityClassifier::<T>::PREFIX);
    let (mut det, mut qual) = (ParamSet::new(), ParamSet::new());
    for (name, t) in all.iter() {
        if name.starts_with(&prefix) {
            qual.add(name, t.clone())?;
        } else {
            det.add(name, t.clone())?;
        }
    }
    let model = Ggvit::from_params(settings.model.config()?, det)
        .with_context(|| format!("{} does not match preset {}", dir.display(), settings.model.preset))?;
    let quality = match settings.quality_image_size {
        Some(s) => Some(QualityClassifier::from_params(QualityConfig::new(s), qual)?),
        None => None,
    };
    Ok(LoadedDetector { settings, model, quality })
}

pub fn save_quality<T: Real>(dir: &Path, qc: &QualityClassifier<T>) -> Result<()> {
    io::save_checkpoint(dir, QUALITY_KIND, &serde_json::json!({ "image_size": qc.config.image_size }), &qc.params)
}

pub fn load_quality<T: Real>(dir: &Path) -> Result<QualityClassifier<T>> {
    let (index, params) = io::load_checkpoint::<T>(dir, QUALITY_KIND)?;
    let size = index.settings["image_size"].as_u64().context("quality checkpoint lacks image_size")? as usize;
    Ok(QualityClassifier::from_params(QualityConfig::new(size), params)?)
}

/// Writes serializable rows as JSON lines.
pub fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
