mod common;

use ggvit_core::init::Init;
use ggvit_core::vit::{embed_tokens, self_attention, vit_forward, ViTConfig, ViTLayout};
use ggvit_core::{Bound, ParamSet, Tape, Tensor};

fn small() -> ViTConfig {
    ViTConfig { image_size: 32, patch_size: 8, dim: 48, depth: 2, heads: 4, ..ViTConfig::tiny() }
}

fn encoder(cfg: &ViTConfig, seed: u64) -> (ViTLayout, ParamSet<f64>) {
    let mut ps = ParamSet::new();
    let layout = ViTLayout::init(cfg, "vit", &mut ps, &mut Init::new(seed)).unwrap();
    (layout, ps)
}

fn run(cfg: &ViTConfig, layout: &ViTLayout, ps: &ParamSet<f64>, images: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::inference();
    let vars = tape.bind(ps).unwrap();
    let x = tape.constant(images.clone()).unwrap();
    let out = vit_forward(&mut tape, Bound::new(&vars), layout, cfg, x).unwrap();
    (tape.value(out.logits).clone(), tape.value(out.embedding).clone())
}

/// Moves patch `perm[i]` of every image to grid position `i`.
fn permute_patches(images: &Tensor<f64>, p: usize, perm: &[usize]) -> Tensor<f64> {
    let (b, s) = (images.shape()[0], images.shape()[2]);
    let g = s / p;
    let mut out = images.clone();
    for n in 0..b {
        for ch in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                let (dr, dc, sr, sc) = (dst / g * p, dst % g * p, src / g * p, src % g * p);
                for r in 0..p {
                    for c in 0..p {
                        let at = |rr: usize, cc: usize| ((n * 3 + ch) * s + rr) * s + cc;
                        out.data_mut()[at(dr + r, dc + c)] = images.data()[at(sr + r, sc + c)];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn zero_input_and_zero_weights_give_head_bias() {
    let cfg = small();
    let (layout, mut ps) = encoder(&cfg, 3);
    let names = ps.names().to_vec();
    for (name, t) in names.iter().zip(ps.tensors_mut()) {
        let keep = name.ends_with(".gain");
        if !keep {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let bias = [0.37, -1.25];
    ps.get_mut(layout.head_b).data_mut().copy_from_slice(&bias);
    let (logits, _) = run(&cfg, &layout, &ps, &Tensor::zeros([2, 3, 32, 32]));
    assert_eq!(logits.data(), &[bias[0], bias[1], bias[0], bias[1]]);
}

#[test]
fn token_count_and_attention_rows() {
    let cfg = small();
    assert_eq!(cfg.n_tokens(), 1 + (32 / 8) * (32 / 8));
    let (layout, ps) = encoder(&cfg, 5);
    let images = common::uniform_images(2, 32, 11);
    let mut tape = Tape::inference();
    let vars = tape.bind(&ps).unwrap();
    let p = Bound::new(&vars);
    let x = tape.constant(images).unwrap();
    let tokens = embed_tokens(&mut tape, p, &layout, &cfg, x).unwrap();
    assert_eq!(tape.shape(tokens), &[2 * cfg.n_tokens(), cfg.dim]);
    let (_, probs) = self_attention(&mut tape, p, &layout.blocks[0], &cfg, tokens, 2).unwrap();
    let t = cfg.n_tokens();
    assert_eq!(tape.shape(probs), &[2 * cfg.heads, t, t]);
    for row in tape.value(probs).data().chunks_exact(t) {
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&a| a > 0.0));
    }
}

#[test]
fn permuting_patches_with_position_rows_leaves_output_unchanged() {
    let cfg = small();
    let (layout, ps) = encoder(&cfg, 7);
    let images = common::uniform_images(2, 32, 13);
    let perm = [5, 0, 14, 3, 9, 11, 1, 7, 2, 15, 4, 8, 13, 6, 10, 12];
    let (logits, emb) = run(&cfg, &layout, &ps, &images);

    let mut moved = ps.clone();
    let d = cfg.dim;
    let pos = ps.get(layout.pos).data();
    let new_pos = moved.get_mut(layout.pos).data_mut();
    for (dst, &src) in perm.iter().enumerate() {
        new_pos[(1 + dst) * d..(2 + dst) * d].copy_from_slice(&pos[(1 + src) * d..(2 + src) * d]);
    }
    let shuffled = permute_patches(&images, 8, &perm);
    let (logits2, emb2) = run(&cfg, &layout, &moved, &shuffled);
    assert!(emb.max_abs_diff(&emb2).unwrap() < 1e-12);
    assert!(logits.max_abs_diff(&logits2).unwrap() < 1e-12);

    let (_, emb3) = run(&cfg, &layout, &ps, &shuffled);
    assert!(emb.max_abs_diff(&emb3).unwrap() > 1e-6, "output ignores patch positions");
}

#[test]
fn forward_is_deterministic() {
    let cfg = small();
    let (layout, ps) = encoder(&cfg, 1);
    let images = common::uniform_images(3, 32, 2);
    assert_eq!(run(&cfg, &layout, &ps, &images), run(&cfg, &layout, &ps, &images));
}

#[test]
fn small_encoder_matches_golden() {
    let cfg = small();
    let (layout, ps) = encoder(&cfg, 2024);
    let images = common::uniform_images(2, 32, 2025);
    let (logits, emb) = run(&cfg, &layout, &ps, &images);
    common::golden("vit_small_logits", &logits);
    common::golden("vit_small_embedding", &emb);
}
