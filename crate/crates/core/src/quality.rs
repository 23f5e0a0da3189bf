//! Compression-quality classifier, the quality-conditioned embedding and the
//! large-margin cosine loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::params::{add_named, find_named, Bound, ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vit::linear;

/// Small strided-conv classifier: three kernel-2, stride-2 conv layers with
/// ReLU, global mean pooling and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityConfig {
    pub image_size: usize,
    pub channels: [usize; 3],
    pub n_classes: usize,
}

impl QualityConfig {
    pub fn new(image_size: usize) -> Self {
        QualityConfig { image_size, channels: [8, 16, 32], n_classes: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 || self.image_size == 0 || self.n_classes < 2 || self.channels.contains(&0) {
            return Err(Error::invalid("quality config", alloc::format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct QualityLayout {
    pub conv_w: [ParamId; 3],
    pub conv_b: [ParamId; 3],
    pub head_w: ParamId,
    pub head_b: ParamId,
}

fn quality_shapes(cfg: &QualityConfig) -> Vec<(alloc::string::String, Vec<usize>, bool)> {
    let mut out = Vec::new();
    let mut cin = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        out.push((alloc::format!("conv{i}.weight"), vec![4 * cin, c], true));
        out.push((alloc::format!("conv{i}.bias"), vec![c], false));
        cin = c;
    }
    out.push(("head.weight".into(), vec![cin, cfg.n_classes], true));
    out.push(("head.bias".into(), vec![cfg.n_classes], false));
    out
}

impl QualityLayout {
    fn from_ids(ids: &[ParamId]) -> Self {
        QualityLayout {
            conv_w: [ids[0], ids[2], ids[4]],
            conv_b: [ids[1], ids[3], ids[5]],
            head_w: ids[6],
            head_b: ids[7],
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init<T: Real>(cfg: &QualityConfig, prefix: &str, params: &mut ParamSet<T>, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let mut ids = Vec::new();
        for (name, shape, weight) in quality_shapes(cfg) {
            let t = if weight {
                init.uniform(&shape, libm::sqrt(6.0 / shape[0] as f64))
            } else {
                Tensor::zeros(shape)
            };
            ids.push(add_named(params, prefix, &name, t)?);
        }
        Ok(Self::from_ids(&ids))
    }

    pub fn find<T: Real>(cfg: &QualityConfig, prefix: &str, params: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let ids = quality_shapes(cfg)
            .iter()
            .map(|(n, s, _)| find_named(params, prefix, n, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(&ids))
    }
}

/// Groups each 2x2 spatial block of a channels-last `[B, n*n, C]` map into
/// `[B, (n/2)^2, 4C]`.
fn pool_blocks<T: Real>(tape: &mut Tape<T>, x: Var, b: usize, n: usize, c: usize) -> Result<Var> {
    let h = n / 2;
    let x = tape.reshape(x, &[b, h, 2, h, 2, c])?;
    let x = tape.transpose(x, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(x, &[b, h * h, 4 * c])
}

/// Quality logits `[B, K]` for `[B, 3, S, S]` images.
pub fn quality_logits<T: Real>(
    tape: &mut Tape<T>,
    p: Bound<'_>,
    layout: &QualityLayout,
    cfg: &QualityConfig,
    images: Var,
) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::shape("quality input", &s, &[3, cfg.image_size, cfg.image_size]));
    }
    let b = s[0];
    // first layer: channel-major 2x2 patches, then channels-last from here on
    let x = crate::vit::patchify(tape, images, 2)?;
    let x = crate::vit::standardize(tape, x)?;
    let mut n = cfg.image_size / 2;
    let mut x = linear(tape, x, p.get(layout.conv_w[0]), p.get(layout.conv_b[0]))?;
    x = tape.leaky_relu(x, T::ZERO)?;
    for i in 1..3 {
        x = pool_blocks(tape, x, b, n, cfg.channels[i - 1])?;
        n /= 2;
        x = linear(tape, x, p.get(layout.conv_w[i]), p.get(layout.conv_b[i]))?;
        x = tape.leaky_relu(x, T::ZERO)?;
    }
    let pooled = tape.mean(x, Some(1))?;
    linear(tape, pooled, p.get(layout.head_w), p.get(layout.head_b))
}

/// Expected severity `sum_k k * p_k / (K - 1)`.
pub fn quality_scalar<T: Real>(probs: &[T]) -> Result<T> {
    if probs.len() < 2 {
        return Err(Error::invalid("quality probabilities", "need at least two classes"));
    }
    let top = T::from_usize(probs.len() - 1);
    Ok(probs.iter().enumerate().map(|(k, &p)| T::from_usize(k) * p).sum::<T>() / top)
}

/// A frozen quality classifier: its own parameter set and layout.
#[derive(Clone, Debug)]
pub struct QualityClassifier<T: Real> {
    pub config: QualityConfig,
    pub params: ParamSet<T>,
    pub layout: QualityLayout,
}

impl<T: Real> QualityClassifier<T> {
    pub const PREFIX: &'static str = "quality";

    pub fn new(config: QualityConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let layout = QualityLayout::init(&config, Self::PREFIX, &mut params, &mut Init::new(seed))?;
        Ok(QualityClassifier { config, params, layout })
    }

    pub fn from_params(config: QualityConfig, params: ParamSet<T>) -> Result<Self> {
        let layout = QualityLayout::find(&config, Self::PREFIX, &params)?;
        Ok(QualityClassifier { config, params, layout })
    }

    /// Class probabilities `[B, K]` for a `[B, 3, S, S]` batch, value-only.
    pub fn probabilities(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let vars = tape.bind(&self.params)?;
        let x = tape.constant(images.clone())?;
        let z = quality_logits(&mut tape, Bound::new(&vars), &self.layout, &self.config, x)?;
        let p = tape.softmax(z)?;
        Ok(tape.value(p).clone())
    }

    /// One quality scalar per image.
    pub fn scalars(&self, images: &Tensor<T>) -> Result<Vec<T>> {
        let p = self.probabilities(images)?;
        p.data().chunks_exact(self.config.n_classes).map(quality_scalar).collect()
    }
}

/// Large-margin cosine head settings. `dim` is the length of the
/// quality-conditioned embedding; the projection produces `dim - 1` values.
#[derive(Clone, Debug, PartialEq)]
pub struct LmcConfig {
    pub dim: usize,
    pub scale: f64,
    pub margin: f64,
}

impl Default for LmcConfig {
    fn default() -> Self {
        LmcConfig { dim: 512, scale: 30.0, margin: 0.35 }
    }
}

impl LmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !(self.scale > 0.0) || !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid("lmc config", alloc::format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LmcLayout {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub class_w: ParamId,
}

impl LmcLayout {
    fn shapes(cfg: &LmcConfig, embed_dim: usize) -> [(&'static str, Vec<usize>); 3] {
        [
            ("proj.weight", vec![embed_dim, cfg.dim - 1]),
            ("proj.bias", vec![cfg.dim - 1]),
            ("class.weight", vec![2, cfg.dim]),
        ]
    }

    pub fn init<T: Real>(
        cfg: &LmcConfig,
        embed_dim: usize,
        prefix: &str,
        params: &mut ParamSet<T>,
        init: &mut Init,
    ) -> Result<Self> {
        cfg.validate()?;
        let [w, b, c] = Self::shapes(cfg, embed_dim);
        Ok(LmcLayout {
            proj_w: add_named(params, prefix, w.0, init.trunc_normal(&w.1, crate::vit::INIT_STD))?,
            proj_b: add_named(params, prefix, b.0, Tensor::zeros(b.1))?,
            class_w: add_named(params, prefix, c.0, init.trunc_normal(&c.1, crate::vit::INIT_STD))?,
        })
    }

    pub fn find<T: Real>(cfg: &LmcConfig, embed_dim: usize, prefix: &str, params: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let [w, b, c] = Self::shapes(cfg, embed_dim);
        Ok(LmcLayout {
            proj_w: find_named(params, prefix, w.0, &w.1)?,
            proj_b: find_named(params, prefix, b.0, &b.1)?,
            class_w: find_named(params, prefix, c.0, &c.1)?,
        })
    }
}

/// `e* = [embedding @ W + b, q]` for a `[B, D]` embedding and `[B, 1]` quality
/// scalars.
pub fn build_quality_embedding<T: Real>(
    tape: &mut Tape<T>,
    p: Bound<'_>,
    layout: &LmcLayout,
    embedding: Var,
    q: Var,
) -> Result<Var> {
    let proj = linear(tape, embedding, p.get(layout.proj_w), p.get(layout.proj_b))?;
    tape.concat(&[proj, q], 1)
}

/// One-hot `[B, classes]` constant.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut data = vec![T::ZERO; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid("label", alloc::format!("{y} out of range 0..{classes}")));
        }
        data[i * classes + y] = T::ONE;
    }
    Tensor::new([labels.len(), classes], data)
}

/// Per-row `-log softmax(z)[y]` `[B]` for `[B, C]` logits. The per-row max
/// is subtracted as a constant, which leaves the gradient unchanged.
pub fn log_softmax_nll_rows<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("nll", &shape, &[labels.len()]));
    }
    let c = shape[1];
    let y = one_hot::<T>(labels, c)?;
    let mut shift = Vec::with_capacity(shape[0] * c);
    for row in tape.value(logits).data().chunks_exact(c) {
        let m = row.iter().copied().fold(row[0], T::max);
        shift.extend(core::iter::repeat(-m).take(c));
    }
    let shift = tape.constant(Tensor::new(shape.clone(), shift)?)?;
    let z = tape.add(logits, shift)?;
    let e = tape.exp(z)?;
    let s = tape.sum(e, Some(1))?;
    let lse = tape.log(s)?;
    let y = tape.constant(y)?;
    let picked = tape.mul(z, y)?;
    let picked = tape.sum(picked, Some(1))?;
    let neg = tape.scale(picked, -T::ONE)?;
    tape.add(lse, neg)
}

/// Summed `-log softmax(z)[y]` over the batch.
pub fn log_softmax_nll<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = log_softmax_nll_rows(tape, logits, labels)?;
    tape.sum(rows, None)
}

/// Scaled cosine logits `s * (cos - m * onehot)` from raw embeddings
/// `[B, dim]` and raw class weights `[2, dim]`.
pub fn lmc_logits<T: Real>(
    tape: &mut Tape<T>,
    cfg: &LmcConfig,
    embeddings: Var,
    class_w: Var,
    labels: &[usize],
) -> Result<Var> {
    let e = tape.l2_normalize(embeddings)?;
    let w = tape.l2_normalize(class_w)?;
    let wt = tape.transpose_last(w)?;
    let cos = tape.matmul(e, wt)?;
    let classes = tape.shape(class_w)[0];
    let margin = one_hot::<T>(labels, classes)?.map(|v| -v * T::from_f64(cfg.margin));
    let margin = tape.constant(margin)?;
    let shifted = tape.add(cos, margin)?;
    tape.scale(shifted, T::from_f64(cfg.scale))
}

/// Per-sample large-margin cosine loss `[B]`.
pub fn lmc_loss_rows<T: Real>(
    tape: &mut Tape<T>,
    cfg: &LmcConfig,
    embeddings: Var,
    class_w: Var,
    labels: &[usize],
) -> Result<Var> {
    cfg.validate()?;
    let logits = lmc_logits(tape, cfg, embeddings, class_w, labels)?;
    log_softmax_nll_rows(tape, logits, labels)
}

/// Large-margin cosine loss summed over the batch.
pub fn lmc_loss<T: Real>(
    tape: &mut Tape<T>,
    cfg: &LmcConfig,
    embeddings: Var,
    class_w: Var,
    labels: &[usize],
) -> Result<Var> {
    let rows = lmc_loss_rows(tape, cfg, embeddings, class_w, labels)?;
    tape.sum(rows, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_scalar_examples() {
        assert_eq!(quality_scalar(&[1.0f64, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(quality_scalar(&[0.0f64, 0.0, 1.0]).unwrap(), 1.0);
        assert!((quality_scalar(&[0.2f64, 0.5, 0.3]).unwrap() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn classifier_outputs_simplex() {
        let qc = QualityClassifier::<f64>::new(QualityConfig::new(16), 3).unwrap();
        let x = Init::new(4).uniform::<f64>(&[2, 3, 16, 16], 1.0);
        let p = qc.probabilities(&x).unwrap();
        assert_eq!(p.shape(), &[2, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let q = qc.scalars(&x).unwrap();
        assert!(q.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn nll_matches_scalar_formula() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let l = log_softmax_nll(&mut tape, z, &[0, 1]).unwrap();
        let want = libm::log1p(libm::exp(-1.0)) + core::f64::consts::LN_2;
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn embedding_keeps_q_last() {
        let mut ps = ParamSet::<f64>::new();
        let cfg = LmcConfig { dim: 8, ..LmcConfig::default() };
        let lay = LmcLayout::init(&cfg, 12, "lmc", &mut ps, &mut Init::new(1)).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(&ps).unwrap();
        let e = tape.constant(Tensor::zeros([1, 12])).unwrap();
        let q = tape.constant(Tensor::full([1, 1], 0.7)).unwrap();
        let out = build_quality_embedding(&mut tape, Bound::new(&vars), &lay, e, q).unwrap();
        let v = tape.value(out).data();
        assert_eq!(v.len(), 8);
        assert_eq!(v[7], 0.7);
        assert!(v[..7].iter().all(|&x| x == 0.0));
    }
}
