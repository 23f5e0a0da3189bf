//! Pre-norm vision transformer encoder with a class token.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::params::{add_named, find_named, Bound, ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Std of the truncated-normal init for projections and position embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
}

impl ViTConfig {
    /// S=64, P=8, D=48, L=4, H=4, MLP x2.
    pub fn tiny() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            dim: 48,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            n_classes: 2,
        }
    }

    /// ViT-B/16 geometry: S=224, P=16, D=768, L=12, H=12, MLP x4.
    pub fn base() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_size > 0
            && self.image_size > 0
            && self.image_size % self.patch_size == 0
            && self.heads > 0
            && self.dim % self.heads == 0
            && self.depth > 0
            && self.n_classes > 0
            && self.mlp_hidden() > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("vit config", alloc::format!("{self:?}")))
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Class token plus patches.
    pub fn n_tokens(&self) -> usize {
        1 + self.n_patches()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        libm::round(self.mlp_ratio * self.dim as f64) as usize
    }
}

#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Where each ViT tensor lives in a [`ParamSet`]. Linear weights are stored
/// `[in, out]`.
#[derive(Clone, Debug)]
pub struct ViTLayout {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockLayout>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Copy)]
enum Fill {
    Normal,
    Zeros,
    Ones,
}

/// Param names, shapes and init in registration order.
fn spec(cfg: &ViTConfig) -> Vec<(String, Vec<usize>, Fill)> {
    use alloc::format;
    use alloc::vec;
    let d = cfg.dim;
    let hid = cfg.mlp_hidden();
    let mut out = vec![
        ("patch.weight".into(), vec![cfg.patch_dim(), d], Fill::Normal),
        ("patch.bias".into(), vec![d], Fill::Zeros),
        ("cls".into(), vec![d], Fill::Zeros),
        ("pos".into(), vec![cfg.n_tokens(), d], Fill::Normal),
    ];
    for l in 0..cfg.depth {
        let p = |n: &str| format!("blocks.{l}.{n}");
        out.extend([
            (p("ln1.gain"), vec![d], Fill::Ones),
            (p("ln1.bias"), vec![d], Fill::Zeros),
            (p("attn.q.weight"), vec![d, d], Fill::Normal),
            (p("attn.q.bias"), vec![d], Fill::Zeros),
            (p("attn.k.weight"), vec![d, d], Fill::Normal),
            (p("attn.k.bias"), vec![d], Fill::Zeros),
            (p("attn.v.weight"), vec![d, d], Fill::Normal),
            (p("attn.v.bias"), vec![d], Fill::Zeros),
            (p("attn.o.weight"), vec![d, d], Fill::Normal),
            (p("attn.o.bias"), vec![d], Fill::Zeros),
            (p("ln2.gain"), vec![d], Fill::Ones),
            (p("ln2.bias"), vec![d], Fill::Zeros),
            (p("mlp.fc1.weight"), vec![d, hid], Fill::Normal),
            (p("mlp.fc1.bias"), vec![hid], Fill::Zeros),
            (p("mlp.fc2.weight"), vec![hid, d], Fill::Normal),
            (p("mlp.fc2.bias"), vec![d], Fill::Zeros),
        ]);
    }
    out.extend([
        ("norm.gain".into(), vec![d], Fill::Ones),
        ("norm.bias".into(), vec![d], Fill::Zeros),
        ("head.weight".into(), vec![d, cfg.n_classes], Fill::Normal),
        ("head.bias".into(), vec![cfg.n_classes], Fill::Zeros),
    ]);
    out
}

impl ViTLayout {
    fn from_ids(cfg: &ViTConfig, ids: &[ParamId]) -> Self {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("one id per spec entry");
        let patch_w = next();
        let patch_b = next();
        let cls = next();
        let pos = next();
        let blocks = (0..cfg.depth)
            .map(|_| BlockLayout {
                ln1_g: next(),
                ln1_b: next(),
                q_w: next(),
                q_b: next(),
                k_w: next(),
                k_b: next(),
                v_w: next(),
                v_b: next(),
                o_w: next(),
                o_b: next(),
                ln2_g: next(),
                ln2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        ViTLayout {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g: next(),
            norm_b: next(),
            head_w: next(),
            head_b: next(),
        }
    }

    /// Registers freshly initialised tensors under `prefix`.
    pub fn init<T: Real>(cfg: &ViTConfig, prefix: &str, params: &mut ParamSet<T>, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let mut ids = Vec::new();
        for (name, shape, fill) in spec(cfg) {
            let t = match fill {
                Fill::Normal => init.trunc_normal(&shape, INIT_STD),
                Fill::Zeros => Tensor::zeros(shape),
                Fill::Ones => Tensor::ones(shape),
            };
            ids.push(add_named(params, prefix, &name, t)?);
        }
        Ok(Self::from_ids(cfg, &ids))
    }

    /// Locates an existing layout under `prefix`, checking every shape.
    pub fn find<T: Real>(cfg: &ViTConfig, prefix: &str, params: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let ids = spec(cfg)
            .iter()
            .map(|(name, shape, _)| find_named(params, prefix, name, shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(cfg, &ids))
    }
}

/// `x @ w + b` over the last axis.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Layernorm over the last axis followed by a per-feature gain and bias.
pub fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layernorm(x)?;
    let n = tape.mul(n, g)?;
    tape.add(n, b)
}

/// `[B, C, S, S]` images to `[B, N, C*P*P]` non-overlapping patches, in
/// row-major patch order, each flattened channel-major.
pub fn patchify<T: Real>(tape: &mut Tape<T>, images: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[2] != s[3] || patch == 0 || s[2] % patch != 0 {
        return Err(Error::shape("patchify", &s, &[patch]));
    }
    let (b, c, n) = (s[0], s[1], s[2] / patch);
    let x = tape.reshape(images, &[b, c, n, patch, n, patch])?;
    let x = tape.transpose(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[b, n * n, c * patch * patch])
}

/// Multi-head self-attention over `[B, T, D]` tokens stored flat as
/// `[B*T, D]`. Returns the projected output (flat) and the attention
/// probabilities `[B*H, T, T]`.
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    p: Bound<'_>,
    blk: &BlockLayout,
    cfg: &ViTConfig,
    x: Var,
    batch: usize,
) -> Result<(Var, Var)> {
    let (t, h, dh) = (cfg.n_tokens(), cfg.heads, cfg.head_dim());
    let heads = |w: ParamId, b: ParamId, tape: &mut Tape<T>| -> Result<Var> {
        let y = linear(tape, x, p.get(w), p.get(b))?;
        let y = tape.reshape(y, &[batch, t, h, dh])?;
        let y = tape.transpose(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[batch * h, t, dh])
    };
    let q = heads(blk.q_w, blk.q_b, tape)?;
    let k = heads(blk.k_w, blk.k_b, tape)?;
    let v = heads(blk.v_w, blk.v_b, tape)?;
    let q = tape.scale(q, T::ONE / T::from_usize(dh).sqrt())?;
    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(q, kt)?;
    let probs = tape.softmax(scores)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.reshape(ctx, &[batch, h, t, dh])?;
    let ctx = tape.transpose(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch * t, cfg.dim])?;
    let out = linear(tape, ctx, p.get(blk.o_w), p.get(blk.o_b))?;
    Ok((out, probs))
}

fn block<T: Real>(tape: &mut Tape<T>, p: Bound<'_>, blk: &BlockLayout, cfg: &ViTConfig, x: Var, batch: usize) -> Result<Var> {
    let h = layer_norm(tape, x, p.get(blk.ln1_g), p.get(blk.ln1_b))?;
    let (a, _) = self_attention(tape, p, blk, cfg, h, batch)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, x, p.get(blk.ln2_g), p.get(blk.ln2_b))?;
    let h = linear(tape, h, p.get(blk.fc1_w), p.get(blk.fc1_b))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, p.get(blk.fc2_w), p.get(blk.fc2_b))?;
    tape.add(x, h)
}

/// Classifier logits `[B, n_classes]` and class-token embedding `[B, D]`.
#[derive(Clone, Copy, Debug)]
pub struct ViTOutput {
    pub logits: Var,
    pub embedding: Var,
}

/// Fixed input standardization `(x - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Applies the input standardization to pixel values along the last axis.
pub fn standardize<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let width = *tape.shape(x).last().ok_or(Error::Empty("standardize input"))?;
    let centre = tape.constant(Tensor::full([width], T::from_f64(-INPUT_MEAN)))?;
    let x = tape.add(x, centre)?;
    tape.scale(x, T::from_f64(1.0 / INPUT_STD))
}

/// Token sequence `[B*T, D]` (class token first) after patch embedding and
/// position embedding.
pub fn embed_tokens<T: Real>(tape: &mut Tape<T>, p: Bound<'_>, layout: &ViTLayout, cfg: &ViTConfig, images: Var) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::shape("vit input", &s, &[3, cfg.image_size, cfg.image_size]));
    }
    let b = s[0];
    let patches = patchify(tape, images, cfg.patch_size)?;
    let flat = tape.reshape(patches, &[b * cfg.n_patches(), cfg.patch_dim()])?;
    let flat = standardize(tape, flat)?;
    let emb = linear(tape, flat, p.get(layout.patch_w), p.get(layout.patch_b))?;
    let emb = tape.reshape(emb, &[b, cfg.n_patches(), cfg.dim])?;
    let cls = tape.reshape(p.get(layout.cls), &[1, 1, cfg.dim])?;
    let cls = tape.tile(cls, &[b, 1, 1])?;
    let tokens = tape.concat(&[cls, emb], 1)?;
    let tokens = tape.add(tokens, p.get(layout.pos))?;
    tape.reshape(tokens, &[b * cfg.n_tokens(), cfg.dim])
}

/// Runs the encoder over `[B, 3, S, S]` images.
pub fn vit_forward<T: Real>(tape: &mut Tape<T>, p: Bound<'_>, layout: &ViTLayout, cfg: &ViTConfig, images: Var) -> Result<ViTOutput> {
    let b = tape.shape(images)[0];
    let mut x = embed_tokens(tape, p, layout, cfg, images)?;
    for blk in &layout.blocks {
        x = block(tape, p, blk, cfg, x, b)?;
    }
    // layernorm is per token, so normalising only the class rows is equivalent
    let cls_rows: Vec<usize> = (0..b).map(|i| i * cfg.n_tokens()).collect();
    let cls = tape.embed_lookup(x, &cls_rows)?;
    let embedding = layer_norm(tape, cls, p.get(layout.norm_g), p.get(layout.norm_b))?;
    let logits = linear(tape, embedding, p.get(layout.head_w), p.get(layout.head_b))?;
    Ok(ViTOutput { logits, embedding })
}

/// Softmax over two-class logits: index 0 is real, 1 is forged.
pub fn predict<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() || !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("logits", "must be finite and nonempty"));
    }
    let m = logits.iter().copied().fold(logits[0], T::max);
    let e: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Index of the largest entry (first on ties).
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
