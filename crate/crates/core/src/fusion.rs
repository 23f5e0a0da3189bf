//! Graph-attention fusion of the five stream predictions.
//!
//! Each unit treats one stream as the main node and all five streams
//! (itself included) as its neighbourhood.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::params::{add_named, find_named, Bound, ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

pub const STREAMS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub hidden: usize,
    pub slope: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { hidden: 8, slope: 0.2 }
    }
}

#[derive(Clone, Debug)]
pub struct GatLayout {
    /// Node projection `[2, F']`.
    pub w: ParamId,
    /// Attention vector `[2F']`: first half scores the main node, second half
    /// the neighbour.
    pub attn: ParamId,
    /// Output head `[F', 2]`.
    pub out: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionLayout {
    pub units: Vec<GatLayout>,
    pub final_w: ParamId,
    pub final_b: ParamId,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

impl FusionLayout {
    fn shapes(cfg: &FusionConfig) -> Vec<(alloc::string::String, Vec<usize>)> {
        let f = cfg.hidden;
        let mut out = Vec::new();
        for k in 0..STREAMS {
            out.push((alloc::format!("gat{k}.w"), vec![2, f]));
            out.push((alloc::format!("gat{k}.attn"), vec![2 * f]));
            out.push((alloc::format!("gat{k}.out"), vec![f, 2]));
        }
        out.push(("final.weight".into(), vec![2 * STREAMS, 2]));
        out.push(("final.bias".into(), vec![2]));
        out
    }

    fn from_ids(ids: &[ParamId]) -> Self {
        let units = ids[..3 * STREAMS]
            .chunks_exact(3)
            .map(|c| GatLayout { w: c[0], attn: c[1], out: c[2] })
            .collect();
        FusionLayout { units, final_w: ids[3 * STREAMS], final_b: ids[3 * STREAMS + 1] }
    }

    /// Glorot-uniform weights, zero final bias.
    pub fn init<T: Real>(cfg: &FusionConfig, prefix: &str, params: &mut ParamSet<T>, init: &mut Init) -> Result<Self> {
        let mut ids = Vec::new();
        for (name, shape) in Self::shapes(cfg) {
            let t = match shape.as_slice() {
                _ if name == "final.bias" => Tensor::zeros(shape.clone()),
                [a, b] => init.uniform(&shape, glorot(*a, *b)),
                _ => init.uniform(&shape, glorot(shape[0], 1)),
            };
            ids.push(add_named(params, prefix, &name, t)?);
        }
        Ok(Self::from_ids(&ids))
    }

    pub fn find<T: Real>(cfg: &FusionConfig, prefix: &str, params: &ParamSet<T>) -> Result<Self> {
        let ids = Self::shapes(cfg)
            .iter()
            .map(|(n, s)| find_named(params, prefix, n, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(&ids))
    }
}

/// Refined 2-vectors `[B, 2]` for main node `main` given node features
/// `nodes: [B, 5, 2]`, plus the attention weights `[B, 5]`.
pub fn gat_refine<T: Real>(
    tape: &mut Tape<T>,
    p: Bound<'_>,
    unit: &GatLayout,
    cfg: &FusionConfig,
    nodes: Var,
    main: usize,
) -> Result<(Var, Var)> {
    let s = tape.shape(nodes).to_vec();
    if s.len() != 3 || s[1] != STREAMS || s[2] != 2 || main >= STREAMS {
        return Err(Error::shape("gat nodes", &s, &[STREAMS, 2]));
    }
    let (b, f) = (s[0], cfg.hidden);
    let h = tape.matmul(nodes, p.get(unit.w))?;
    let a = tape.reshape(p.get(unit.attn), &[2, f])?;
    let a = tape.transpose_last(a)?;
    // scores[.., j, 0] = a_main . h_j, scores[.., j, 1] = a_nbr . h_j
    let scores = tape.matmul(h, a)?;
    let main_score = tape.slice(scores, 1, main, 1)?;
    let main_score = tape.slice(main_score, 2, 0, 1)?;
    let main_score = tape.reshape(main_score, &[b, 1])?;
    let main_score = tape.tile(main_score, &[1, STREAMS])?;
    let nbr = tape.slice(scores, 2, 1, 1)?;
    let nbr = tape.reshape(nbr, &[b, STREAMS])?;
    let e = tape.add(main_score, nbr)?;
    let e = tape.leaky_relu(e, T::from_f64(cfg.slope))?;
    let alpha = tape.softmax(e)?;
    let weights = tape.reshape(alpha, &[b, 1, STREAMS])?;
    let agg = tape.matmul(weights, h)?;
    let agg = tape.reshape(agg, &[b, f])?;
    let out = tape.matmul(agg, p.get(unit.out))?;
    Ok((out, alpha))
}

/// Output of the fusion block.
#[derive(Clone, Debug)]
pub struct Fused {
    /// Final logits `[B, 2]`.
    pub logits: Var,
    /// Concatenated refinements `[B, 10]`, stream `k` in slots `2k, 2k+1`.
    pub fusion: Var,
    /// Attention weights per unit, each `[B, 5]`.
    pub alphas: Vec<Var>,
}

/// Runs all five units over stream probabilities (five `[B, 2]` tensors) and
/// applies the final linear layer.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    p: Bound<'_>,
    layout: &FusionLayout,
    cfg: &FusionConfig,
    stream_probs: &[Var],
) -> Result<Fused> {
    if stream_probs.len() != STREAMS {
        return Err(Error::invalid("stream count", alloc::format!("{} != {STREAMS}", stream_probs.len())));
    }
    let b = tape.shape(stream_probs[0])[0];
    let mut cols = Vec::with_capacity(STREAMS);
    for &v in stream_probs {
        cols.push(tape.reshape(v, &[b, 1, 2])?);
    }
    let nodes = tape.concat(&cols, 1)?;
    let mut refined = Vec::with_capacity(STREAMS);
    let mut alphas = Vec::with_capacity(STREAMS);
    for (k, unit) in layout.units.iter().enumerate() {
        let (r, a) = gat_refine(tape, p, unit, cfg, nodes, k)?;
        refined.push(r);
        alphas.push(a);
    }
    let fusion = tape.concat(&refined, 1)?;
    let logits = crate::vit::linear(tape, fusion, p.get(layout.final_w), p.get(layout.final_b))?;
    Ok(Fused { logits, fusion, alphas })
}

/// Standalone value-level graph-attention unit.
#[derive(Clone, Debug)]
pub struct GatUnit<T: Real> {
    pub w: Tensor<T>,
    pub attn: Tensor<T>,
    pub out: Tensor<T>,
    pub slope: f64,
}

impl<T: Real> GatUnit<T> {
    pub fn random(hidden: usize, slope: f64, init: &mut Init) -> Self {
        GatUnit {
            w: init.uniform(&[2, hidden], 1.0),
            attn: init.uniform(&[2 * hidden], 1.0),
            out: init.uniform(&[hidden, 2], 1.0),
            slope,
        }
    }

    /// Refines `main` against its four `neighbors`. Returns the refined
    /// 2-vector and attention weights with the main node first.
    pub fn refine(&self, main: [T; 2], neighbors: &[[T; 2]; 4]) -> Result<([T; 2], [T; 5])> {
        let mut ps = ParamSet::new();
        let w = ps.add("w", self.w.clone())?;
        let attn = ps.add("attn", self.attn.clone())?;
        let out = ps.add("out", self.out.clone())?;
        let cfg = FusionConfig { hidden: self.w.shape()[1], slope: self.slope };
        let mut data = main.to_vec();
        for n in neighbors {
            data.extend_from_slice(n);
        }
        let mut tape = Tape::inference();
        let vars = tape.bind(&ps)?;
        let nodes = tape.constant(Tensor::new([1, STREAMS, 2], data)?)?;
        let unit = GatLayout { w, attn, out };
        let (r, a) = gat_refine(&mut tape, Bound::new(&vars), &unit, &cfg, nodes, 0)?;
        let (r, a) = (tape.value(r).data(), tape.value(a).data());
        Ok(([r[0], r[1]], [a[0], a[1], a[2], a[3], a[4]]))
    }
}

/// Mean absolute-magnitude share of each stream's two slots, in percent.
pub fn stream_proportions(fusions: &[Vec<f64>]) -> Result<[f64; STREAMS]> {
    if fusions.is_empty() {
        return Err(Error::Empty("fusion tensors"));
    }
    let mut acc = [0.0; STREAMS];
    for f in fusions {
        if f.len() != 2 * STREAMS || f.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("fusion tensor", alloc::format!("expected {} finite values", 2 * STREAMS)));
        }
        let total: f64 = f.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            return Err(Error::ZeroNorm("fusion tensor"));
        }
        for (k, a) in acc.iter_mut().enumerate() {
            *a += (f[2 * k].abs() + f[2 * k + 1].abs()) / total;
        }
    }
    let n = fusions.len() as f64;
    Ok(acc.map(|a| 100.0 * a / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_give_uniform_attention() {
        let unit = GatUnit::<f64>::random(8, 0.2, &mut Init::new(5));
        let v = [0.3, 0.7];
        let (_, a) = unit.refine(v, &[v; 4]).unwrap();
        for x in a {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn proportions_examples() {
        let mut one_hot = vec![0.0; 10];
        one_hot[0] = 1.0;
        assert_eq!(stream_proportions(&[one_hot]).unwrap(), [100.0, 0.0, 0.0, 0.0, 0.0]);
        let p = stream_proportions(&[vec![-0.5; 10]]).unwrap();
        assert!(p.iter().all(|&x| (x - 20.0).abs() < 1e-12));
        assert!(stream_proportions(&[vec![0.0; 10]]).is_err());
        assert!(stream_proportions(&[]).is_err());
    }
}
