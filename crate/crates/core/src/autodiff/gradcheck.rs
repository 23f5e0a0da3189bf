//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::params::ParamSet;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Which coordinates of each parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    /// Up to `per_param` distinct random coordinates per tensor.
    Sample { per_param: usize, seed: u64 },
    /// Per tensor whose name passes `include`, `per_param` coordinates, each
    /// the one with the largest analytic gradient among `candidates` random
    /// draws. Keeps the check above the roundoff floor of the differences.
    Salient {
        per_param: usize,
        candidates: usize,
        seed: u64,
        include: fn(&str) -> bool,
    },
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude over the whole tensor.
    pub max_abs_grad: f64,
    /// Coordinate, analytic and numeric derivative at the worst point.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords_checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    /// Parameters whose worst coordinate fails the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error >= self.tol)
    }
}

fn pick_coords(n: usize, sel: CoordSelection, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match sel {
        CoordSelection::All => (0..n).collect(),
        CoordSelection::Sample { per_param, .. } | CoordSelection::Salient { per_param, .. } if per_param >= n => {
            (0..n).collect()
        }
        CoordSelection::Sample { per_param, .. } | CoordSelection::Salient { per_param, .. } => {
            let mut picked: Vec<usize> = Vec::with_capacity(per_param);
            while picked.len() < per_param {
                let c = rng.random_range(0..n);
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            picked.sort_unstable();
            picked
        }
    }
}

/// Compares tape gradients of `loss` against central differences
/// `(f(x + h) - f(x - h)) / 2h` for the selected coordinates of `params`.
///
/// `loss` receives a fresh tape and the bound parameter vars (in `params`
/// order) and returns a var whose entries sum to the loss. It is called once
/// on a recording tape and twice per checked coordinate on value-only tapes.
/// For a non-scalar result the difference is taken entry by entry before
/// summing, which keeps the rounding of large unrelated terms out of it.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &ParamSet<f64>,
    sel: CoordSelection,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.bind(params)?;
    let terms = loss(&mut tape, &vars)?;
    let root = match tape.shape(terms).iter().product::<usize>() {
        1 => terms,
        _ => tape.sum(terms, None)?,
    };
    let grads = tape.backward(root)?.collect(&vars)?;
    drop(tape);

    let mut eval = |p: &ParamSet<f64>| -> Result<Vec<f64>> {
        let mut t = Tape::inference();
        let vars = t.bind(p)?;
        let terms = loss(&mut t, &vars)?;
        Ok(t.value(terms).data().to_vec())
    };

    let seed = match sel {
        CoordSelection::Sample { seed, .. } | CoordSelection::Salient { seed, .. } => seed,
        CoordSelection::All => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        step,
        tol,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, name) in params.names().iter().enumerate() {
        let n = params.tensors()[pi].len();
        let coords = match sel {
            CoordSelection::Salient { include, .. } if !include(name) => Vec::new(),
            CoordSelection::Salient { per_param, candidates, .. } if per_param < n => {
                let g = grads[pi].data();
                let mut picked: Vec<usize> = Vec::with_capacity(per_param);
                while picked.len() < per_param {
                    let best = (0..candidates.max(1))
                        .map(|_| rng.random_range(0..n))
                        .filter(|c| !picked.contains(c))
                        .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()));
                    if let Some(c) = best {
                        picked.push(c);
                    }
                }
                picked.sort_unstable();
                picked
            }
            _ => pick_coords(n, sel, &mut rng),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_grad: grads[pi].data().iter().fold(0.0, |m, g| m.max(g.abs())),
            worst: None,
        };
        for &c in &coords {
            let orig = work.tensors()[pi].data()[c];
            work.tensors_mut()[pi].data_mut()[c] = orig + step;
            let plus = eval(&work)?;
            work.tensors_mut()[pi].data_mut()[c] = orig - step;
            let minus = eval(&work)?;
            work.tensors_mut()[pi].data_mut()[c] = orig;
            let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
            let numeric = diff / (2.0 * step);
            let analytic = grads[pi].data()[c];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((c, analytic, numeric));
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
