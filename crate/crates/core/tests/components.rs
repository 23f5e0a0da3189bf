use ggvit_core::fusion::{fuse, FusionConfig, FusionLayout, GatUnit, STREAMS};
use ggvit_core::guidance::{embed_to_grid, grid_side, guide_on_tape, inject, tile_grid};
use ggvit_core::init::Init;
use ggvit_core::quality::{lmc_logits, lmc_loss, log_softmax_nll, LmcConfig};
use ggvit_core::{Bound, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lmc_value(cfg: &LmcConfig, e: &Tensor<f64>, w: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut tape = Tape::inference();
    let ev = tape.constant(e.clone()).unwrap();
    let wv = tape.constant(w.clone()).unwrap();
    let l = lmc_loss(&mut tape, cfg, ev, wv, labels).unwrap();
    tape.value(l).item().unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cosines(e: &Tensor<f64>, w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = e.shape()[1];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    e.data()
        .chunks_exact(d)
        .map(|ei| {
            w.data()
                .chunks_exact(d)
                .map(|wj| ei.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>() / (norm(ei) * norm(wj)))
                .collect()
        })
        .collect()
}

#[test]
fn lmc_without_margin_is_cross_entropy_of_scaled_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let e = random(&mut rng, &[4, 16]);
        let w = random(&mut rng, &[2, 16]);
        let labels = [0, 1, 1, 0];
        let cfg = LmcConfig { dim: 16, scale: 30.0, margin: 0.0 };
        let got = lmc_value(&cfg, &e, &w, &labels);
        let want: f64 = cosines(&e, &w)
            .iter()
            .zip(&labels)
            .map(|(c, &y)| {
                let z: Vec<f64> = c.iter().map(|v| 30.0 * v).collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
            })
            .sum();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");

        let mut tape = Tape::inference();
        let ev = tape.constant(e.clone()).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        let z = lmc_logits(&mut tape, &cfg, ev, wv, &labels).unwrap();
        let ce = log_softmax_nll(&mut tape, z, &labels).unwrap();
        assert!((tape.value(ce).item().unwrap() - got).abs() < 1e-9);
    }
}

#[test]
fn lmc_strictly_increases_with_margin_when_true_class_wins() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 20 {
        let e = random(&mut rng, &[3, 12]);
        let w = random(&mut rng, &[2, 12]);
        let labels: Vec<usize> = cosines(&e, &w).iter().map(|c| usize::from(c[1] > c[0])).collect();
        let losses: Vec<f64> = [0.0, 0.1, 0.2, 0.35]
            .iter()
            .map(|&m| lmc_value(&LmcConfig { dim: 12, scale: 30.0, margin: m }, &e, &w, &labels))
            .collect();
        assert!(losses.windows(2).all(|p| p[1] > p[0]), "{losses:?}");
        checked += 1;
    }
}

#[test]
fn lmc_is_invariant_to_positive_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = LmcConfig { dim: 10, scale: 30.0, margin: 0.35 };
    for _ in 0..20 {
        let e = random(&mut rng, &[3, 10]);
        let w = random(&mut rng, &[2, 10]);
        let labels = [1, 0, 1];
        let base = lmc_value(&cfg, &e, &w, &labels);
        let mut e2 = e.clone();
        for (i, row) in e2.data_mut().chunks_exact_mut(10).enumerate() {
            row.iter_mut().for_each(|v| *v *= 0.01 + 7.3 * i as f64);
        }
        let mut w2 = w.clone();
        w2.data_mut()[..10].iter_mut().for_each(|v| *v *= 123.0);
        w2.data_mut()[10..].iter_mut().for_each(|v| *v *= 0.004);
        assert!((lmc_value(&cfg, &e2, &w2, &labels) - base).abs() < 1e-9);
    }
}

#[test]
fn lmc_closed_form_spot_values() {
    let e = Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap();
    let w = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let no_margin = lmc_value(&LmcConfig { dim: 2, scale: 1.0, margin: 0.0 }, &e, &w, &[0]);
    assert!((no_margin - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-9);
    assert!((no_margin - 0.31326).abs() < 1e-5);
    let margin = lmc_value(&LmcConfig { dim: 2, scale: 1.0, margin: 0.35 }, &e, &w, &[0]);
    assert!((margin - (1.0 + (-0.65f64).exp()).ln()).abs() < 1e-9);
    assert!((margin - 0.4200553).abs() < 1e-6);
}

#[test]
fn zero_guidance_is_an_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random(&mut rng, &[3, 64, 64]);
    let guide = tile_grid(&embed_to_grid(&Tensor::zeros([48]), 4).unwrap(), 64).unwrap();
    let out = inject(&q, &guide).unwrap();
    assert_eq!(out.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn reshape_and_tile_match_index_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (dim, side) in [(48, 64), (768, 224), (12, 6)] {
        let g = grid_side(dim).unwrap();
        let e = random(&mut rng, &[dim]);
        let grid = embed_to_grid(&e, g).unwrap();
        let tiled = tile_grid(&grid, side).unwrap();
        for c in 0..3 {
            for i in 0..side {
                for j in 0..side {
                    let want = e.data()[c * g * g + (i % g) * g + j % g];
                    assert_eq!(tiled.data()[(c * side + i) * side + j].to_bits(), want.to_bits());
                }
            }
        }
        // batched tape path agrees with the value path bit for bit
        let mut tape = Tape::inference();
        let ev = tape.constant(e.reshape([1, dim]).unwrap()).unwrap();
        let gv = guide_on_tape(&mut tape, ev, side).unwrap();
        assert_eq!(tape.value(gv).data(), tiled.data());
    }
}

#[test]
fn guide_is_linear_in_the_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let guide = |e: &Tensor<f64>| tile_grid(&embed_to_grid(e, 4).unwrap(), 64).unwrap();
    for _ in 0..10 {
        let (a, b) = (random(&mut rng, &[48]), random(&mut rng, &[48]));
        let (x, y) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix = Tensor::new([48], a.data().iter().zip(b.data()).map(|(p, q)| x * p + y * q).collect()).unwrap();
        let (ga, gb, gm) = (guide(&a), guide(&b), guide(&mix));
        for i in 0..gm.len() {
            assert!((gm.data()[i] - (x * ga.data()[i] + y * gb.data()[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_dim_must_be_three_squares() {
    assert_eq!(grid_side(768).unwrap(), 16);
    assert_eq!(grid_side(48).unwrap(), 4);
    for bad in [0, 1, 47, 49, 767, 769, 512] {
        assert!(grid_side(bad).is_err(), "{bad}");
    }
    let mut tape = Tape::<f64>::inference();
    let e = tape.constant(Tensor::zeros([1, 50])).unwrap();
    assert!(guide_on_tape(&mut tape, e, 64).is_err());
}

/// Scalar double-loop graph attention over `nodes[0]` as the main node.
fn gat_oracle(u: &GatUnit<f64>, nodes: &[[f64; 2]; 5]) -> ([f64; 2], [f64; 5]) {
    let f = u.w.shape()[1];
    let (w, a, o) = (u.w.data(), u.attn.data(), u.out.data());
    let mut h = [[0.0; 64]; 5];
    for j in 0..5 {
        for k in 0..f {
            h[j][k] = nodes[j][0] * w[k] + nodes[j][1] * w[f + k];
        }
    }
    let mut e = [0.0; 5];
    for j in 0..5 {
        let mut s = 0.0;
        for k in 0..f {
            s += a[k] * h[0][k] + a[f + k] * h[j][k];
        }
        e[j] = if s >= 0.0 { s } else { u.slope * s };
    }
    let m = e.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
    let alpha: [f64; 5] = std::array::from_fn(|j| (e[j] - m).exp() / z);
    let mut agg = [0.0; 64];
    for j in 0..5 {
        for k in 0..f {
            agg[k] += alpha[j] * h[j][k];
        }
    }
    let mut out = [0.0; 2];
    for (c, oc) in out.iter_mut().enumerate() {
        for k in 0..f {
            *oc += agg[k] * o[k * 2 + c];
        }
    }
    (out, alpha)
}

#[test]
fn gat_refine_matches_naive_oracle() {
    for seed in 0..60 {
        let mut init = Init::new(seed);
        let hidden = 1 + (seed as usize % 12);
        let unit = GatUnit::<f64>::random(hidden, 0.2, &mut init);
        let rng = init.rng();
        let nodes: [[f64; 2]; 5] = std::array::from_fn(|_| {
            let p = rng.random_range(0.0..1.0);
            [p, 1.0 - p]
        });
        let nbrs = [nodes[1], nodes[2], nodes[3], nodes[4]];
        let (out, alpha) = unit.refine(nodes[0], &nbrs).unwrap();
        let (want, want_alpha) = gat_oracle(&unit, &nodes);
        for c in 0..2 {
            assert!((out[c] - want[c]).abs() < 1e-9, "seed {seed}");
        }
        for j in 0..5 {
            assert!((alpha[j] - want_alpha[j]).abs() < 1e-9, "seed {seed}");
        }
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(alpha.iter().all(|&a| a > 0.0));
        // neighbour order does not matter
        let (out2, _) = unit.refine(nodes[0], &[nodes[3], nodes[1], nodes[4], nodes[2]]).unwrap();
        for c in 0..2 {
            assert!((out2[c] - out[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_inputs_give_uniform_attention() {
    for seed in 0..10 {
        let unit = GatUnit::<f64>::random(8, 0.2, &mut Init::new(seed));
        let v = [0.25, 0.75];
        let (_, alpha) = unit.refine(v, &[v; 4]).unwrap();
        assert!(alpha.iter().all(|a| (a - 0.2).abs() < 1e-12));
    }
}

fn fusion_fixture(seed: u64) -> (FusionLayout, ParamSet<f64>, Vec<Tensor<f64>>) {
    let mut params = ParamSet::new();
    let mut init = Init::new(seed);
    let layout = FusionLayout::init(&FusionConfig::default(), "fusion", &mut params, &mut init).unwrap();
    let rng = init.rng();
    let probs = (0..STREAMS)
        .map(|_| {
            let d: Vec<f64> = (0..3).flat_map(|_| {
                let p = rng.random_range(0.0..1.0);
                [p, 1.0 - p]
            }).collect();
            Tensor::new([3, 2], d).unwrap()
        })
        .collect();
    (layout, params, probs)
}

fn run_fuse(layout: &FusionLayout, params: &ParamSet<f64>, probs: &[Tensor<f64>]) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::inference();
    let vars = tape.bind(params).unwrap();
    let sp: Vec<_> = probs.iter().map(|p| tape.constant(p.clone()).unwrap()).collect();
    let f = fuse(&mut tape, Bound::new(&vars), layout, &FusionConfig::default(), &sp).unwrap();
    (tape.value(f.logits).clone(), tape.value(f.fusion).clone())
}

#[test]
fn fusion_slots_follow_stream_order() {
    let (layout, mut params, probs) = fusion_fixture(9);
    let (_, fusion) = run_fuse(&layout, &params, &probs);
    // slot pair k is unit k refining stream k against the others
    for k in 0..STREAMS {
        let u = &layout.units[k];
        let unit = GatUnit {
            w: params.get(u.w).clone(),
            attn: params.get(u.attn).clone(),
            out: params.get(u.out).clone(),
            slope: 0.2,
        };
        for b in 0..3 {
            let node = |s: usize| [probs[s].data()[2 * b], probs[s].data()[2 * b + 1]];
            let others: Vec<[f64; 2]> = (0..STREAMS).filter(|&s| s != k).map(node).collect();
            let (r, _) = unit.refine(node(k), &others.try_into().unwrap()).unwrap();
            for c in 0..2 {
                assert!((fusion.data()[b * 10 + 2 * k + c] - r[c]).abs() < 1e-12);
            }
        }
    }
    // one-hot final weights read back exactly one slot
    for slot in 0..10 {
        let w = params.get_mut(layout.final_w);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.data_mut()[slot * 2 + 1] = 1.0;
        let (logits, fusion) = run_fuse(&layout, &params, &probs);
        for b in 0..3 {
            assert_eq!(logits.data()[b * 2], params.get(layout.final_b).data()[0]);
            assert_eq!(logits.data()[b * 2 + 1], fusion.data()[b * 10 + slot] + params.get(layout.final_b).data()[1]);
        }
    }
}

#[test]
fn zero_final_head_returns_bias() {
    let (layout, mut params, probs) = fusion_fixture(2);
    params.get_mut(layout.final_w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    params.get_mut(layout.final_b).data_mut().copy_from_slice(&[0.3, -1.2]);
    let (logits, _) = run_fuse(&layout, &params, &probs);
    assert_eq!(logits.data(), &[0.3, -1.2, 0.3, -1.2, 0.3, -1.2]);
}
