//! Index-shuffling kernels shared by forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[i_0..i_r] = x[i_perm^-1 ...]`, i.e. output axis `a` is input axis `perm[a]`.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        // advance the outer odometer
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Calls `f(out_offset, in_offset)` for every element of a tiled tensor.
pub(crate) fn for_each_tile_index(shape: &[usize], reps: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let out_shape: Vec<usize> = shape.iter().zip(reps).map(|(s, r)| s * r).collect();
    let in_strides = strides(shape);
    let total: usize = out_shape.iter().product();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            let before = idx[axis] % shape[axis];
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                if before + 1 == shape[axis] {
                    src -= before * in_strides[axis];
                } else {
                    src += in_strides[axis];
                }
                break;
            }
            src -= before * in_strides[axis];
            idx[axis] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let perm = [2, 0, 1];
        let (out, out_shape) = permute(&data, &shape, &perm);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    // out[a][b][c] = x[b][c][a]
                    assert_eq!(out[a * 6 + b * 3 + c], data[b * 12 + c * 4 + a]);
                }
            }
        }
        let (back, _) = permute(&out, &out_shape, &inverse_perm(&perm));
        assert_eq!(back, data);
    }

    #[test]
    fn tile_indices() {
        let mut pairs = Vec::new();
        for_each_tile_index(&[1, 2], &[2, 2], |o, i| pairs.push((o, i)));
        assert_eq!(
            pairs,
            vec![(0, 0), (1, 1), (2, 0), (3, 1), (4, 0), (5, 1), (6, 0), (7, 1)]
        );
    }
}
