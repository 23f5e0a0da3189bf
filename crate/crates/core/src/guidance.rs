//! Global guidance: the whole-face embedding, reshaped to a `3 x G x G` grid
//! and tiled to `3 x S x S`, is added to every quadrant image.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Grid side `G` with `3 * G * G == dim`.
pub fn grid_side(dim: usize) -> Result<usize> {
    let g = libm::sqrt(dim as f64 / 3.0) as usize;
    (g.saturating_sub(1)..=g + 1)
        .find(|&g| g > 0 && 3 * g * g == dim)
        .ok_or_else(|| Error::invalid("embedding dim", alloc::format!("{dim} is not 3*G^2")))
}

/// Channel-major, row-major reshape: `e[c*G*G + i*G + j] -> grid[c][i][j]`.
pub fn embed_to_grid<T: Real>(embedding: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    if embedding.rank() != 1 || embedding.len() != 3 * g * g {
        return Err(Error::invalid(
            "embedding",
            alloc::format!("shape {:?} cannot form a 3x{g}x{g} grid", embedding.shape()),
        ));
    }
    embedding.reshape([3, g, g])
}

/// `out[c][i][j] = grid[c][i mod G][j mod G]`.
pub fn tile_grid<T: Real>(grid: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let s = grid.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] == 0 {
        return Err(Error::shape("tile_grid", s, &[3]));
    }
    let g = s[1];
    if side % g != 0 || side == 0 {
        return Err(Error::invalid("tile side", alloc::format!("{side} is not a multiple of {g}")));
    }
    let src = grid.data();
    let mut out = alloc::vec::Vec::with_capacity(s[0] * side * side);
    for c in 0..s[0] {
        for i in 0..side {
            let row = &src[(c * g + i % g) * g..(c * g + i % g + 1) * g];
            for j in 0..side {
                out.push(row[j % g]);
            }
        }
    }
    Tensor::new([s[0], side, side], out)
}

/// Element-wise sum of a quadrant image and its guide.
pub fn inject<T: Real>(quadrant: &Tensor<T>, guide: &Tensor<T>) -> Result<Tensor<T>> {
    if quadrant.shape() != guide.shape() {
        return Err(Error::shape("inject", quadrant.shape(), guide.shape()));
    }
    let data = quadrant.data().iter().zip(guide.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(quadrant.shape().to_vec(), data)
}

/// Batched guide on a tape: `[B, D]` embeddings to `[B, 3, S, S]`.
pub fn guide_on_tape<T: Real>(tape: &mut Tape<T>, embedding: Var, side: usize) -> Result<Var> {
    let shape = tape.shape(embedding).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("guide", &shape, &[2]));
    }
    let g = grid_side(shape[1])?;
    if side % g != 0 {
        return Err(Error::invalid("tile side", alloc::format!("{side} is not a multiple of {g}")));
    }
    let grid = tape.reshape(embedding, &[shape[0], 3, g, g])?;
    tape.tile(grid, &[1, 1, side / g, side / g])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn grid_sides() {
        assert_eq!(grid_side(768).unwrap(), 16);
        assert_eq!(grid_side(48).unwrap(), 4);
        assert_eq!(grid_side(12).unwrap(), 2);
        assert!(grid_side(50).is_err());
        assert!(grid_side(0).is_err());
    }

    #[test]
    fn reshape_example() {
        let e = Tensor::<f64>::new([12], (0..12).map(|v| v as f64).collect()).unwrap();
        let g = embed_to_grid(&e, 2).unwrap();
        assert_eq!(g.data(), e.data());
        assert_eq!(g.shape(), &[3, 2, 2]);
        assert!(embed_to_grid(&e, 3).is_err());
    }

    #[test]
    fn tile_example() {
        let grid = Tensor::<f64>::from_f64([3, 2, 2], &[1., 2., 3., 4., 0., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        let out = tile_grid(&grid, 4).unwrap();
        let ch0: Vec<f64> = out.data()[..16].to_vec();
        assert_eq!(ch0, [1., 2., 1., 2., 3., 4., 3., 4., 1., 2., 1., 2., 3., 4., 3., 4.]);
        assert!(tile_grid(&grid, 5).is_err());
    }

    #[test]
    fn inject_rules() {
        let q = Tensor::<f64>::from_f64([1, 2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let z = Tensor::zeros([1, 2, 2]);
        assert_eq!(inject(&q, &z).unwrap(), q);
        let g = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(inject(&q, &g).unwrap(), inject(&g, &q).unwrap());
        assert!(inject(&q, &Tensor::zeros([1, 4])).is_err());
    }

    #[test]
    fn inject_gradient_is_ones_on_both_sides() {
        let mut tape = Tape::<f64>::new();
        let q = tape.param(Tensor::from_f64([1, 2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let g = tape.param(Tensor::from_f64([1, 2, 2], &[1.0, -1.0, 0.5, 2.0]).unwrap()).unwrap();
        let s = tape.add(q, g).unwrap();
        let root = tape.sum(s, None).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(q).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.get(g).unwrap().data(), &[1.0; 4]);
    }
}
