//! Every tape op against central finite differences, over 20 seeds each.

use ggvit_core::autodiff::{finite_diff_check, CoordSelection};
use ggvit_core::{ParamSet, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Checks `sum(op(inputs) * w)` for a fixed random weight `w`, so ops whose
/// plain sum is constant (softmax, normalisations) are still exercised.
fn check_op<F>(name: &str, shapes: &[&[usize]], range: (f64, f64), op: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let mut params = ParamSet::new();
        for (i, s) in shapes.iter().enumerate() {
            params.add(format!("x{i}"), random(&mut rng, s, range.0, range.1)).unwrap();
        }
        // probe the output shape once to size the weight
        let mut probe = Tape::inference();
        let vars = probe.bind(&params).unwrap();
        let out = op(&mut probe, &vars).unwrap();
        let w = random(&mut rng, probe.shape(out), -1.0, 1.0);
        let report = finite_diff_check(
            |tape, vars| {
                let y = op(tape, vars)?;
                let w = tape.constant(w.clone())?;
                let p = tape.mul(y, w)?;
                tape.sum(p, None)
            },
            &params,
            CoordSelection::All,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(
            report.passed(),
            "{name} seed {seed}: max rel error {:e} ({:?})",
            report.max_rel_error(),
            report.failures().collect::<Vec<_>>()
        );
    }
}

#[test]
fn matmul_shared_rhs() {
    check_op("matmul", &[&[2, 3, 4], &[4, 5]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn matmul_batched() {
    check_op("bmm", &[&[3, 2, 4], &[3, 4, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn add_and_mul_broadcast() {
    check_op("add", &[&[3, 4], &[4]], (-1.0, 1.0), |t, v| t.add(v[0], v[1]));
    check_op("add-rev", &[&[4], &[2, 4]], (-1.0, 1.0), |t, v| t.add(v[0], v[1]));
    check_op("mul", &[&[2, 3, 4], &[3, 4]], (-1.0, 1.0), |t, v| t.mul(v[0], v[1]));
}

#[test]
fn scale_reshape_transpose() {
    check_op("scale", &[&[5]], (-1.0, 1.0), |t, v| t.scale(v[0], -2.5));
    check_op("reshape", &[&[2, 6]], (-1.0, 1.0), |t, v| t.reshape(v[0], &[3, 4]));
    check_op("transpose", &[&[2, 3, 4]], (-1.0, 1.0), |t, v| t.transpose(v[0], &[1, 2, 0]));
}

#[test]
fn tile_concat_slice() {
    check_op("tile", &[&[2, 3]], (-1.0, 1.0), |t, v| t.tile(v[0], &[2, 3]));
    check_op("concat", &[&[2, 3], &[2, 1], &[2, 2]], (-1.0, 1.0), |t, v| t.concat(v, 1));
    check_op("slice", &[&[3, 5, 2]], (-1.0, 1.0), |t, v| t.slice(v[0], 1, 1, 3));
}

#[test]
fn softmax_layernorm_l2() {
    check_op("softmax", &[&[3, 5]], (-2.0, 2.0), |t, v| t.softmax(v[0]));
    check_op("layernorm", &[&[3, 6]], (-2.0, 2.0), |t, v| t.layernorm(v[0]));
    check_op("l2", &[&[4, 3]], (-2.0, 2.0), |t, v| t.l2_normalize(v[0]));
}

#[test]
fn pointwise() {
    check_op("gelu", &[&[10]], (-3.0, 3.0), |t, v| t.gelu(v[0]));
    check_op("leaky", &[&[10]], (-3.0, 3.0), |t, v| t.leaky_relu(v[0], 0.2));
    check_op("log", &[&[10]], (0.1, 3.0), |t, v| t.log(v[0]));
    check_op("exp", &[&[10]], (-2.0, 2.0), |t, v| t.exp(v[0]));
}

#[test]
fn reductions_and_lookup() {
    check_op("mean", &[&[3, 4]], (-1.0, 1.0), |t, v| t.mean(v[0], None));
    check_op("mean-axis", &[&[3, 4, 2]], (-1.0, 1.0), |t, v| t.mean(v[0], Some(1)));
    check_op("sum", &[&[3, 4]], (-1.0, 1.0), |t, v| t.sum(v[0], None));
    check_op("sum-axis", &[&[3, 4]], (-1.0, 1.0), |t, v| t.sum(v[0], Some(0)));
    check_op("lookup", &[&[4, 3]], (-1.0, 1.0), |t, v| t.embed_lookup(v[0], &[2, 0, 2]));
}

#[test]
fn shared_subexpression() {
    // x feeds two branches that recombine; gradients must accumulate.
    check_op("fanout", &[&[4]], (-1.0, 1.0), |t, v| {
        let a = t.exp(v[0])?;
        let b = t.mul(v[0], a)?;
        let c = t.gelu(v[0])?;
        t.add(b, c)
    });
}
