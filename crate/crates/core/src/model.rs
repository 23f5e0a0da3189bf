//! The five-stream detector: whole-face stream, guided quadrant streams,
//! margin head and fusion block.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, FusionLayout, Fused, STREAMS};
use crate::guidance::{grid_side, guide_on_tape};
use crate::init::Init;
use crate::losses::{l_fusion_rows, l_vit_rows, total_on_tape, DEFAULT_LAMBDA};
use crate::params::{Bound, ParamSet};
use crate::quality::{build_quality_embedding, lmc_loss_rows, LmcConfig, LmcLayout};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vit::{vit_forward, ViTConfig, ViTLayout};

/// Which optional components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    /// Add the tiled whole-face embedding to each quadrant input.
    pub guidance: bool,
    /// Quality block with the margin loss.
    pub iqb: bool,
    /// Graph-attention fusion block with its own loss.
    pub fab: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { guidance: true, iqb: true, fab: true };
    pub const BASE: Variant = Variant { guidance: true, iqb: false, fab: false };
    pub const IQB: Variant = Variant { guidance: true, iqb: true, fab: false };
    pub const FAB: Variant = Variant { guidance: true, iqb: false, fab: true };
    /// Full model without guidance injection.
    pub const NO_GUIDANCE: Variant = Variant { guidance: false, iqb: true, fab: true };

    pub fn name(&self) -> String {
        let mut s = String::from(if self.guidance { "GGViT" } else { "MultiStream" });
        match (self.iqb, self.fab) {
            (false, false) => s.push_str("-base"),
            (true, false) => s.push_str("+IQB"),
            (false, true) => s.push_str("+FAB"),
            (true, true) => s.push_str("+IQB+FAB"),
        }
        s
    }

    pub fn parse(name: &str) -> Result<Self> {
        [Self::FULL, Self::BASE, Self::IQB, Self::FAB, Self::NO_GUIDANCE, Variant { guidance: false, iqb: false, fab: false }]
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(name))
            .or(match name {
                "full" => Some(Self::FULL),
                "base" => Some(Self::BASE),
                "iqb" => Some(Self::IQB),
                "fab" => Some(Self::FAB),
                "no-guidance" => Some(Self::NO_GUIDANCE),
                _ => None,
            })
            .ok_or_else(|| Error::invalid("variant", alloc::format!("unknown variant {name}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub lmc: LmcConfig,
    pub fusion: FusionConfig,
    pub lambda: f64,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            vit: ViTConfig::tiny(),
            lmc: LmcConfig::default(),
            fusion: FusionConfig::default(),
            lambda: DEFAULT_LAMBDA,
            variant: Variant::FULL,
        }
    }

    pub fn base() -> Self {
        ModelConfig { vit: ViTConfig::base(), ..Self::tiny() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            _ => Err(Error::invalid("preset", alloc::format!("unknown preset {name}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.lmc.validate()?;
        if self.variant.guidance && self.vit.image_size % grid_side(self.vit.dim)? != 0 {
            return Err(Error::invalid("guidance", "image side is not a multiple of the grid side"));
        }
        if !(self.lambda >= 0.0) || self.fusion.hidden == 0 {
            return Err(Error::invalid("model config", alloc::format!("{self:?}")));
        }
        Ok(())
    }
}

/// Parameter layout of the whole detector.
#[derive(Clone, Debug)]
pub struct GgvitLayout {
    pub streams: Vec<ViTLayout>,
    pub lmc: Option<LmcLayout>,
    pub fusion: Option<FusionLayout>,
}

fn stream_prefix(k: usize) -> String {
    alloc::format!("stream{k}")
}

impl GgvitLayout {
    pub fn init<T: Real>(cfg: &ModelConfig, params: &mut ParamSet<T>, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let streams = (0..STREAMS)
            .map(|k| ViTLayout::init(&cfg.vit, &stream_prefix(k), params, init))
            .collect::<Result<Vec<_>>>()?;
        let lmc = match cfg.variant.iqb {
            true => Some(LmcLayout::init(&cfg.lmc, cfg.vit.dim, "lmc", params, init)?),
            false => None,
        };
        let fusion = match cfg.variant.fab {
            true => Some(FusionLayout::init(&cfg.fusion, "fusion", params, init)?),
            false => None,
        };
        Ok(GgvitLayout { streams, lmc, fusion })
    }

    pub fn find<T: Real>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let streams = (0..STREAMS)
            .map(|k| ViTLayout::find(&cfg.vit, &stream_prefix(k), params))
            .collect::<Result<Vec<_>>>()?;
        let lmc = match cfg.variant.iqb {
            true => Some(LmcLayout::find(&cfg.lmc, cfg.vit.dim, "lmc", params)?),
            false => None,
        };
        let fusion = match cfg.variant.fab {
            true => Some(FusionLayout::find(&cfg.fusion, "fusion", params)?),
            false => None,
        };
        Ok(GgvitLayout { streams, lmc, fusion })
    }
}

/// A detector: configuration, parameters and their layout.
#[derive(Clone, Debug)]
pub struct Ggvit<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub layout: GgvitLayout,
}

impl<T: Real> Ggvit<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let layout = GgvitLayout::init(&config, &mut params, &mut Init::new(seed))?;
        Ok(Ggvit { config, params, layout })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let layout = GgvitLayout::find(&config, &params)?;
        Ok(Ggvit { config, params, layout })
    }

    /// Value-only forward pass.
    pub fn infer(&self, batch: &StreamBatch<T>) -> Result<Inference<T>> {
        let mut tape = Tape::inference();
        let vars = tape.bind(&self.params)?;
        let out = forward(&mut tape, Bound::new(&vars), &self.layout, &self.config, batch, ForwardOptions::default())?;
        Ok(Inference {
            stream_probs: out.stream_probs.iter().map(|&v| tape.value(v).clone()).collect(),
            final_probs: tape.value(out.final_probs).clone(),
            fusion: out.fused.as_ref().map(|f| tape.value(f.fusion).clone()),
        })
    }
}

/// Inputs for one batch: the five streams, each `[B, 3, S, S]`, labels and
/// quality scalars.
#[derive(Clone, Debug)]
pub struct StreamBatch<T: Real> {
    pub streams: [Tensor<T>; STREAMS],
    pub labels: Vec<usize>,
    pub quality: Vec<T>,
}

impl<T: Real> StreamBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let b = self.labels.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let s = cfg.vit.image_size;
        for t in &self.streams {
            if t.shape() != [b, 3, s, s] {
                return Err(Error::shape("stream batch", t.shape(), &[b, 3, s, s]));
            }
        }
        if cfg.variant.iqb && self.quality.len() != b {
            return Err(Error::invalid("quality scalars", alloc::format!("{} for batch of {b}", self.quality.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the whole-face embedding by zeros before it is injected.
    pub zero_guidance: bool,
}

/// Tape handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub stream_logits: Vec<Var>,
    pub stream_probs: Vec<Var>,
    /// Whole-face embedding `[B, D]`.
    pub embedding: Var,
    /// `[B, lmc.dim]` when the quality block is active.
    pub quality_embedding: Option<Var>,
    pub fused: Option<Fused>,
    /// Final class probabilities `[B, 2]`; the mean of stream probabilities
    /// when the fusion block is off.
    pub final_probs: Var,
}

/// Value-only outputs.
#[derive(Clone, Debug)]
pub struct Inference<T: Real> {
    pub stream_probs: Vec<Tensor<T>>,
    pub final_probs: Tensor<T>,
    pub fusion: Option<Tensor<T>>,
}

pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    p: Bound<'_>,
    layout: &GgvitLayout,
    cfg: &ModelConfig,
    batch: &StreamBatch<T>,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    batch.validate(cfg)?;
    let b = batch.len();
    let s = cfg.vit.image_size;
    let x0 = tape.constant(batch.streams[0].clone())?;
    let whole = vit_forward(tape, p, &layout.streams[0], &cfg.vit, x0)?;
    let guide = if cfg.variant.guidance {
        let e = match opts.zero_guidance {
            true => tape.constant(Tensor::zeros([b, cfg.vit.dim]))?,
            false => whole.embedding,
        };
        Some(guide_on_tape(tape, e, s)?)
    } else {
        None
    };
    let mut stream_logits = alloc::vec![whole.logits];
    for k in 1..STREAMS {
        let mut x = tape.constant(batch.streams[k].clone())?;
        if let Some(g) = guide {
            x = tape.add(x, g)?;
        }
        stream_logits.push(vit_forward(tape, p, &layout.streams[k], &cfg.vit, x)?.logits);
    }
    let stream_probs = stream_logits.iter().map(|&z| tape.softmax(z)).collect::<Result<Vec<_>>>()?;

    let quality_embedding = match &layout.lmc {
        Some(lmc) => {
            let q = tape.constant(Tensor::new([b, 1], batch.quality.clone())?)?;
            Some(build_quality_embedding(tape, p, lmc, whole.embedding, q)?)
        }
        None => None,
    };
    let (fused, final_probs) = match &layout.fusion {
        Some(f) => {
            let fused = fuse(tape, p, f, &cfg.fusion, &stream_probs)?;
            let probs = tape.softmax(fused.logits)?;
            (Some(fused), probs)
        }
        None => {
            let mut acc = stream_probs[0];
            for &v in &stream_probs[1..] {
                acc = tape.add(acc, v)?;
            }
            (None, tape.scale(acc, T::ONE / T::from_usize(STREAMS))?)
        }
    };
    Ok(ForwardOutput { stream_logits, stream_probs, embedding: whole.embedding, quality_embedding, fused, final_probs })
}

/// Per-sample loss terms on the tape: `[5B]` stream cross-entropies
/// (stream-major), `[B]` margin losses and `[B]` fusion cross-entropies.
#[derive(Clone, Copy, Debug)]
pub struct LossRows {
    pub l_vit: Var,
    pub l_lmc: Option<Var>,
    pub l_fusion: Option<Var>,
}

pub fn loss_rows<T: Real>(
    tape: &mut Tape<T>,
    p: Bound<'_>,
    layout: &GgvitLayout,
    cfg: &ModelConfig,
    out: &ForwardOutput,
    labels: &[usize],
) -> Result<LossRows> {
    let l_vit = l_vit_rows(tape, &out.stream_probs, labels)?;
    let l_lmc = match (&layout.lmc, out.quality_embedding) {
        (Some(lmc), Some(e)) => Some(lmc_loss_rows(tape, &cfg.lmc, e, p.get(lmc.class_w), labels)?),
        _ => None,
    };
    let l_fusion = match &out.fused {
        Some(f) => Some(l_fusion_rows(tape, f.logits, labels)?),
        None => None,
    };
    Ok(LossRows { l_vit, l_lmc, l_fusion })
}

/// Loss components on the tape, each summed over the batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_vit: Var,
    pub l_lmc: Option<Var>,
    pub l_fusion: Option<Var>,
    pub total: Var,
}

pub fn loss<T: Real>(
    tape: &mut Tape<T>,
    p: Bound<'_>,
    layout: &GgvitLayout,
    cfg: &ModelConfig,
    out: &ForwardOutput,
    labels: &[usize],
) -> Result<LossVars> {
    let rows = loss_rows(tape, p, layout, cfg, out, labels)?;
    let lv = tape.sum(rows.l_vit, None)?;
    let lm = rows.l_lmc.map(|r| tape.sum(r, None)).transpose()?;
    let lf = rows.l_fusion.map(|r| tape.sum(r, None)).transpose()?;
    let total = total_on_tape(tape, lv, lm, lf, cfg.lambda)?;
    Ok(LossVars { l_vit: lv, l_lmc: lm, l_fusion: lf, total })
}
