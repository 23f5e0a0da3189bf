//! Finite-difference checks of every loss term through the full detector.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{finite_diff_check, CoordSelection, GradCheckReport, Tape, Var};
use crate::error::Result;
use crate::fusion::STREAMS;
use crate::init::Init;
use crate::model::{forward, loss_rows, ForwardOptions, Ggvit, ModelConfig, StreamBatch};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Std of the noise added to every parameter before checking. Keeps
/// gradients well above the roundoff floor of central differences.
pub const CHECK_PARAM_NOISE: f64 = 0.2;

/// Bound on the gradient of parameters the loss is exactly invariant to.
pub const INVARIANT_GRAD_BOUND: f64 = 1e-10;

/// Key-projection biases shift every score of a query row by the same amount,
/// so attention softmax cancels them and their exact gradient is zero. A
/// relative-error check on an exact zero only measures roundoff, so these are
/// checked against [`INVARIANT_GRAD_BOUND`] instead.
pub fn is_softmax_invariant(name: &str) -> bool {
    name.ends_with("attn.k.bias")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Vit,
    Lmc,
    Fusion,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Vit, LossTerm::Lmc, LossTerm::Fusion, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Vit => "l_vit",
            LossTerm::Lmc => "l_lmc",
            LossTerm::Fusion => "l_fusion",
            LossTerm::Total => "total",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckSettings {
    pub batch: usize,
    pub seed: u64,
    pub per_param: usize,
    /// Random draws per checked coordinate; the largest-gradient one is used.
    pub candidates: usize,
    pub step: f64,
    pub tol: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings { batch: 2, seed: 0, per_param: 1, candidates: 32, step: 1e-6, tol: 1e-4 }
    }
}

/// Random model parameters and a random batch for `cfg`.
pub fn check_fixture(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<(ParamSet<f64>, StreamBatch<f64>)> {
    check_fixture_with_noise(cfg, batch, seed, CHECK_PARAM_NOISE)
}

pub fn check_fixture_with_noise(cfg: &ModelConfig, batch: usize, seed: u64, noise_std: f64) -> Result<(ParamSet<f64>, StreamBatch<f64>)> {
    let mut model = Ggvit::<f64>::new(cfg.clone(), seed)?;
    let mut init = Init::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    for t in model.params.tensors_mut() {
        let noise: Tensor<f64> = init.trunc_normal(t.shape(), noise_std);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let s = cfg.vit.image_size;
    let streams: [Tensor<f64>; STREAMS] = core::array::from_fn(|_| {
        init.uniform(&[batch, 3, s, s], 0.5).map(|v| v + 0.5)
    });
    let labels = (0..batch).map(|i| i % 2).collect();
    let quality = init.uniform::<f64>(&[batch], 0.5).data().iter().map(|v| v + 0.5).collect();
    Ok((model.params, StreamBatch { streams, labels, quality }))
}

/// Checks one loss term of `cfg` with every parameter of the detector.
pub fn check_loss_term(cfg: &ModelConfig, term: LossTerm, settings: &CheckSettings) -> Result<GradCheckReport> {
    check_loss_term_with_noise(cfg, term, settings, CHECK_PARAM_NOISE)
}

pub fn check_loss_term_with_noise(cfg: &ModelConfig, term: LossTerm, settings: &CheckSettings, noise_std: f64) -> Result<GradCheckReport> {
    let (params, batch) = check_fixture_with_noise(cfg, settings.batch, settings.seed, noise_std)?;
    let layout = crate::model::GgvitLayout::find(cfg, &params)?;
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let p = Bound::new(vars);
        let out = forward(tape, p, &layout, cfg, &batch, ForwardOptions::default())?;
        let rows = loss_rows(tape, p, &layout, cfg, &out, &batch.labels)?;
        let missing = || crate::Error::invalid("loss term", alloc::format!("{} is disabled", term.name()));
        match term {
            LossTerm::Vit => Ok(rows.l_vit),
            LossTerm::Lmc => rows.l_lmc.ok_or_else(missing),
            LossTerm::Fusion => rows.l_fusion.ok_or_else(missing),
            LossTerm::Total => {
                let mut parts = alloc::vec![rows.l_vit];
                if let Some(l) = rows.l_lmc {
                    parts.push(tape.scale(l, cfg.lambda)?);
                }
                parts.extend(rows.l_fusion);
                tape.concat(&parts, 0)
            }
        }
    };
    let sel = CoordSelection::Salient {
        per_param: settings.per_param,
        candidates: settings.candidates,
        seed: settings.seed,
        include: |n| !is_softmax_invariant(n),
    };
    finite_diff_check(f, &params, sel, settings.step, settings.tol)
}

/// Largest gradient magnitude among softmax-invariant parameters.
pub fn invariant_grad_max(report: &GradCheckReport) -> f64 {
    report
        .params
        .iter()
        .filter(|p| is_softmax_invariant(&p.name))
        .map(|p| p.max_abs_grad)
        .fold(0.0, f64::max)
}

/// Finite-difference tolerance met and invariant gradients vanish.
pub fn term_passed(report: &GradCheckReport) -> bool {
    report.passed() && invariant_grad_max(report) < INVARIANT_GRAD_BOUND
}

/// One line per term: name, coordinates checked, max relative error, verdict.
pub fn summary_line(term: LossTerm, report: &GradCheckReport) -> String {
    alloc::format!(
        "{:<9} coords={:<5} max_rel_err={:.3e} invariant_grad={:.1e} {}",
        term.name(),
        report.coords_checked(),
        report.max_rel_error(),
        invariant_grad_max(report),
        if term_passed(report) { "PASS" } else { "FAIL" }
    )
}

/// Names of parameters that failed, with their worst coordinates.
pub fn failure_lines(report: &GradCheckReport) -> Vec<String> {
    report
        .failures()
        .map(|p| alloc::format!("  {}: rel={:.3e} at {:?}", p.name, p.max_rel_error, p.worst))
        .collect()
}
