//! Manifests, the synthetic forgery corpus and batching.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ggvit_core::fusion::STREAMS;
use ggvit_core::model::StreamBatch;
use ggvit_core::preprocess::{preprocess, FaceBox, StreamSet};
use ggvit_core::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io;

pub const QUALITY_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => bail!("unknown split {s:?} (expected train, val or test)"),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One manifest line as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub path: String,
    pub label: i64,
    pub quality: i64,
    pub split: String,
    /// Face box `[x, y, w, h]`; the whole frame when absent.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub face: Option<[f64; 4]>,
    /// Forged region `[x, y, w, h]` in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<[usize; 4]>,
}

/// A validated sample with its image path resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    /// 0 real, 1 forged.
    pub label: usize,
    /// 0 pristine to 2 heaviest degradation.
    pub quality: usize,
    pub split: Split,
    pub face: Option<FaceBox>,
    pub patch: Option<[usize; 4]>,
}

fn validate_record(r: &Record, base: &Path) -> Result<Sample> {
    if !(0..=1).contains(&r.label) {
        bail!("field `label` must be 0 or 1, got {}", r.label);
    }
    if !(0..QUALITY_LEVELS as i64).contains(&r.quality) {
        bail!("field `quality` must be in 0..{QUALITY_LEVELS}, got {}", r.quality);
    }
    let split = Split::parse(&r.split).context("field `split`")?;
    let face = match r.face {
        Some([x, y, w, h]) => Some(FaceBox::new(x, y, w, h).context("field `box`")?),
        None => None,
    };
    if r.path.is_empty() {
        bail!("field `path` is empty");
    }
    Ok(Sample {
        path: base.join(&r.path),
        label: r.label as usize,
        quality: r.quality as usize,
        split,
        face,
        patch: r.patch,
    })
}

/// Parses JSON-lines manifest text; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).with_context(|| format!("manifest line {}", i + 1))?;
        out.push(validate_record(&rec, base).with_context(|| format!("manifest line {}", i + 1))?);
    }
    Ok(out)
}

/// Loads and validates a manifest, checking that every image exists.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = parse_manifest(&text, base).with_context(|| format!("in {}", path.display()))?;
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| !s.path.is_file())
        .map(|s| s.path.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("{} missing image(s): {}", missing.len(), missing.join(", "));
    }
    Ok(samples)
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Sample counts keyed by `(split, label, quality)`.
pub fn counts(samples: &[Sample]) -> BTreeMap<(Split, usize, usize), usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry((s.split, s.label, s.quality)).or_insert(0) += 1;
    }
    m
}

pub fn format_counts(samples: &[Sample]) -> String {
    counts(samples)
        .iter()
        .map(|((split, label, q), n)| format!("{split} label={label} quality={q}: {n}\n"))
        .collect()
}

/// Samples of one split, optionally restricted to one quality level.
pub fn select(samples: &[Sample], split: Split, quality: Option<usize>) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| s.split == split && quality.is_none_or(|q| s.quality == q))
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Side of the generated square frames, in pixels.
    pub side: usize,
    /// Real/forged pairs per split.
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    pub patch_min: usize,
    pub patch_max: usize,
    /// Half-width of the uniform per-pixel noise on every image.
    pub noise: f64,
    /// Amplitude of the diagonal stripe texture inside a forged patch.
    pub stripe_amplitude: f64,
    /// Gaussian blur std per quality level (0 disables).
    pub blur_sigma: [f64; QUALITY_LEVELS],
    /// Number of value levels per quality level (0 keeps full precision).
    pub quant_levels: [u32; QUALITY_LEVELS],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            side: 80,
            train_pairs: 200,
            val_pairs: 40,
            test_pairs: 60,
            patch_min: 14,
            patch_max: 20,
            noise: 0.03,
            stripe_amplitude: 0.12,
            blur_sigma: [0.0, 0.7, 1.4],
            quant_levels: [0, 24, 10],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 32 || self.patch_min == 0 || self.patch_min > self.patch_max || self.patch_max > self.side / 4 {
            bail!("synth config: need side >= 32 and 0 < patch_min <= patch_max <= side/4");
        }
        if !(self.noise >= 0.0) || !(self.stripe_amplitude >= 0.0) || self.blur_sigma.iter().any(|s| !(*s >= 0.0)) || self.quant_levels.iter().any(|&l| l == 1) {
            bail!("synth config: blur must be nonnegative and quantization levels 0 or >= 2");
        }
        Ok(())
    }

    pub fn pairs(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_pairs,
            Split::Val => self.val_pairs,
            Split::Test => self.test_pairs,
        }
    }
}

/// `[3, side, side]` image in `[0, 1]` plus the face box.
struct Face {
    image: Vec<f64>,
    face: [f64; 4],
}

fn generate_face(rng: &mut ChaCha8Rng, side: usize, noise: f64) -> Face {
    let n = side * side;
    let s = side as f64;
    let mut img = vec![0.0; 3 * n];
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.75));
    let waves: [(f64, f64, f64, f64); 3] = std::array::from_fn(|_| {
        (
            rng.random_range(0.02..0.07),
            rng.random_range(0.02..0.07),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.04..0.12),
        )
    });
    let cx = s / 2.0 + rng.random_range(-4.0..4.0);
    let cy = s / 2.0 + rng.random_range(-4.0..4.0);
    let a = rng.random_range(0.22..0.29) * s;
    let b = rng.random_range(0.28..0.34) * s;
    let skin = [rng.random_range(0.55..0.9), rng.random_range(0.38..0.68), rng.random_range(0.28..0.55)];
    let eye = [rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random_range(0.1..0.3)];
    let lip = [rng.random_range(0.45..0.7), rng.random_range(0.1..0.25), rng.random_range(0.12..0.28)];
    let eye_dx = rng.random_range(0.35..0.45) * a;
    let eye_y = cy - rng.random_range(0.2..0.3) * b;
    let mouth_y = cy + rng.random_range(0.4..0.5) * b;
    let inside = |x: f64, y: f64, ex: f64, ey: f64, rx: f64, ry: f64| {
        let (dx, dy) = ((x - ex) / rx, (y - ey) / ry);
        dx * dx + dy * dy <= 1.0
    };
    for r in 0..side {
        for c in 0..side {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let (dx, dy) = ((x - cx) / a, (y - cy) / b);
            let rho = dx * dx + dy * dy;
            let mut px = [0.0; 3];
            for ch in 0..3 {
                let (fx, fy, ph, amp) = waves[ch];
                px[ch] = bg[ch] + amp * libm::sin(std::f64::consts::TAU * (fx * x + fy * y) + ph);
            }
            if rho <= 1.0 {
                let shade = 1.0 - 0.3 * rho;
                px = std::array::from_fn(|ch| skin[ch] * shade);
                if inside(x, y, cx - eye_dx, eye_y, 0.17 * a, 0.1 * b) || inside(x, y, cx + eye_dx, eye_y, 0.17 * a, 0.1 * b)
                {
                    px = eye;
                } else if inside(x, y, cx, mouth_y, 0.35 * a, 0.08 * b) {
                    px = lip;
                }
            }
            for ch in 0..3 {
                img[ch * n + r * side + c] = px[ch] + rng.random_range(-noise..=noise);
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    let face = [libm::round(cx - a), libm::round(cy - b), libm::round(2.0 * a), libm::round(2.0 * b)];
    Face { image: img, face }
}

/// Forges a patch inside a random quadrant of the face box. Returns the patch
/// `[x, y, w, h]`.
fn forge(rng: &mut ChaCha8Rng, img: &mut [f64], side: usize, face: [f64; 4], cfg: &SynthConfig) -> [usize; 4] {
    let n = side * side;
    let quadrant = rng.random_range(0..4usize);
    let [fx, fy, fw, fh] = face;
    let (qx0, qy0) = (fx + (quadrant % 2) as f64 * fw / 2.0, fy + (quadrant / 2) as f64 * fh / 2.0);
    let clamp = |v: f64| v.max(0.0).min(side as f64) as usize;
    let (x0, x1) = (clamp(qx0.ceil()), clamp((qx0 + fw / 2.0).floor()));
    let (y0, y1) = (clamp(qy0.ceil()), clamp((qy0 + fh / 2.0).floor()));
    let p = rng.random_range(cfg.patch_min..=cfg.patch_max).min(x1 - x0).min(y1 - y0).max(1);
    let px = rng.random_range(x0..=x1 - p);
    let py = rng.random_range(y0..=y1 - p);
    let m = rng.random_range(0.25..0.4);
    let shift = [-m, m, m];
    let period = rng.random_range(6..10usize);
    for r in py..py + p {
        for c in px..px + p {
            let stripe = if (r + c) % period < period / 2 { cfg.stripe_amplitude } else { -cfg.stripe_amplitude };
            for ch in 0..3 {
                let v = &mut img[ch * n + r * side + c];
                *v = (*v + shift[ch] + stripe).clamp(0.0, 1.0);
            }
        }
    }
    [px, py, p, p]
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &[f64], channels: usize, side: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let at = |i: isize| i.clamp(0, side as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    let mut out = vec![0.0; img.len()];
    for ch in 0..channels {
        let base = ch * side * side;
        for r in 0..side {
            for c in 0..side {
                tmp[base + r * side + c] =
                    (-radius..=radius).map(|d| k[(d + radius) as usize] * img[base + r * side + at(c as isize + d)]).sum();
            }
        }
        for r in 0..side {
            for c in 0..side {
                out[base + r * side + c] =
                    (-radius..=radius).map(|d| k[(d + radius) as usize] * tmp[base + at(r as isize + d) * side + c]).sum();
            }
        }
    }
    out
}

/// Uniform quantization to `levels` values in `[0, 1]`.
pub fn quantize(img: &mut [f64], levels: u32) {
    if levels < 2 {
        return;
    }
    let top = f64::from(levels - 1);
    for v in img {
        *v = libm::round(v.clamp(0.0, 1.0) * top) / top;
    }
}

/// Applies the degradation of `level`.
pub fn degrade(img: &[f64], side: usize, level: usize, cfg: &SynthConfig) -> Vec<f64> {
    let mut out = gaussian_blur(img, 3, side, cfg.blur_sigma[level]);
    quantize(&mut out, cfg.quant_levels[level]);
    out
}

/// Writes the corpus under `out` (`images/` plus `manifest.jsonl`) and
/// returns its records. Every pair yields a real and a forged image at every
/// quality level.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Vec<Record>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = cfg.side;
    let mut records = Vec::new();
    for split in Split::ALL {
        let dir = out.join("images").join(split.name());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for i in 0..cfg.pairs(split) {
            let face = generate_face(&mut rng, side, cfg.noise);
            let mut forged = face.image.clone();
            let patch = forge(&mut rng, &mut forged, side, face.face, cfg);
            for (label, img) in [(0, &face.image), (1, &forged)] {
                for q in 0..QUALITY_LEVELS {
                    let t = Tensor::new([3, side, side], degrade(img, side, q, cfg))?;
                    let name = format!("{i:05}_{}_q{q}.png", if label == 0 { "real" } else { "fake" });
                    io::write_png(&dir.join(&name), &t)?;
                    records.push(Record {
                        path: format!("images/{}/{name}", split.name()),
                        label,
                        quality: q as i64,
                        split: split.name().to_string(),
                        face: Some(face.face),
                        patch: (label == 1).then_some(patch),
                    });
                }
            }
        }
    }
    write_manifest(&out.join("manifest.jsonl"), &records)?;
    io::write_json(&out.join("synth.json"), cfg)?;
    Ok(records)
}

/// Decodes a sample's image and runs the crop/quadrant pipeline.
pub fn load_streams(sample: &Sample, size: usize) -> Result<StreamSet> {
    let img = io::read_png(&sample.path)?;
    let face = match sample.face {
        Some(b) => b,
        None => FaceBox::new(0.0, 0.0, img.shape()[2] as f64, img.shape()[1] as f64)?,
    };
    preprocess(&img, &face, size).with_context(|| format!("preprocessing {}", sample.path.display()))
}

/// Index batches for one epoch. With `shuffle`, the order is a seeded
/// permutation that depends on `seed` and `epoch`; the last batch may be short.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        bail!("batch size must be at least 1");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        idx.shuffle(&mut rng);
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks preprocessed samples into a model batch. Quality scalars are left
/// empty.
pub fn stack_batch<T: Real>(sets: &[StreamSet], labels: Vec<usize>) -> Result<StreamBatch<T>> {
    let streams: Vec<Tensor<T>> = (0..STREAMS)
        .map(|k| Tensor::stack(&sets.iter().map(|s| s.stream(k).cast::<T>()).collect::<Vec<_>>()))
        .collect::<ggvit_core::Result<_>>()?;
    let streams: [Tensor<T>; STREAMS] = streams.try_into().expect("five streams");
    Ok(StreamBatch { streams, labels, quality: Vec::new() })
}

/// Loads, preprocesses and stacks the samples at `idx`.
pub fn load_batch<T: Real>(samples: &[Sample], idx: &[usize], size: usize) -> Result<(StreamBatch<T>, Vec<usize>)> {
    let sets = idx.iter().map(|&i| load_streams(&samples[i], size)).collect::<Result<Vec<_>>>()?;
    let labels = idx.iter().map(|&i| samples[i].label).collect();
    let quality = idx.iter().map(|&i| samples[i].quality).collect();
    Ok((stack_batch(&sets, labels)?, quality))
}
