//! Face crop geometry and resampling.
//!
//! A detected face box is squared on its longer side, enlarged 1.1x about its
//! centre, cropped (zero outside the frame) and resampled to `S x S`. The
//! crop is then cut into four `S/2` quadrants, each resampled back to `S x S`.
//!
//! Resampling is bilinear with half-pixel centres; sample positions are
//! clamped to the first and last pixel centre of the source region.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Linear enlargement applied to the squared box side, as a ratio 11/10.
pub const EXPAND_NUM: f64 = 11.0;
pub const EXPAND_DEN: f64 = 10.0;

/// Axis-aligned box in pixel coordinates. `x`, `y` may be negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = FaceBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("face box", alloc::format!("{self:?} needs finite coords and positive extents")));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// Grid the enlarged side is snapped to, in pixels.
const SIDE_QUANTUM: f64 = 1.0 / (1u64 << 20) as f64;

/// Square box on the longer side, scaled by 1.1, same centre.
///
/// The side is snapped to a 2^-20 px grid so that, for boxes whose coordinates
/// lie on that grid (integer detector boxes included), the corner arithmetic
/// is exact and the centre is preserved bit for bit.
pub fn expand_box(b: &FaceBox) -> FaceBox {
    let side = libm::round(b.w.max(b.h) * EXPAND_NUM / EXPAND_DEN / SIDE_QUANTUM) * SIDE_QUANTUM;
    let (cx, cy) = b.center();
    FaceBox {
        x: cx - side / 2.0,
        y: cy - side / 2.0,
        w: side,
        h: side,
    }
}

/// Index of the box whose centre is nearest `mask_center`; ties go to the
/// lower index.
pub fn select_face(boxes: &[FaceBox], mask_center: (f64, f64)) -> Result<FaceBox> {
    let mut best: Option<(f64, FaceBox)> = None;
    for b in boxes {
        let (cx, cy) = b.center();
        let d = (cx - mask_center.0) * (cx - mask_center.0) + (cy - mask_center.1) * (cy - mask_center.1);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, *b));
        }
    }
    best.map(|(_, b)| b).ok_or(Error::Empty("select_face"))
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Source taps for one output coordinate: lower index, fraction.
fn taps(start: f64, extent: f64, out: usize) -> Vec<(i64, f64)> {
    let scale = extent / out as f64;
    let lo = start;
    let hi = (start + extent - 1.0).max(lo);
    (0..out)
        .map(|i| {
            let s = (start + (i as f64 + 0.5) * scale - 0.5).clamp(lo, hi);
            let f = libm::floor(s);
            (f as i64, s - f)
        })
        .collect()
}

/// Crops `box` out of a `C x H x W` image (zero outside the frame) and
/// resamples it to `C x size x size`.
pub fn crop_resize(image: &Tensor<f64>, b: &FaceBox, size: usize) -> Result<Tensor<f64>> {
    b.validate()?;
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("crop_resize", shape, &[3]));
    }
    if size == 0 {
        return Err(Error::invalid("output size", "must be positive"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let pixel = |ch: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    let rows = taps(b.y, b.h, size);
    let cols = taps(b.x, b.w, size);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for &(y0, fy) in &rows {
            for &(x0, fx) in &cols {
                let top = lerp(pixel(ch, y0, x0), pixel(ch, y0, x0 + 1), fx);
                let bottom = lerp(pixel(ch, y0 + 1, x0), pixel(ch, y0 + 1, x0 + 1), fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    Tensor::new([c, size, size], out)
}

/// Resamples a whole `C x H x W` image to `C x size x size`.
pub fn resize(image: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize", s, &[3]));
    }
    crop_resize(image, &FaceBox::new(0.0, 0.0, s[2] as f64, s[1] as f64)?, size)
}

/// The five stream inputs: whole face and its four quadrants.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSet<T = f64> {
    /// X0.
    pub whole: Tensor<T>,
    /// X1..X4: upper-left, upper-right, lower-left, lower-right.
    pub quadrants: [Tensor<T>; 4],
}

impl<T: Real> StreamSet<T> {
    /// Stream `i` in X0..X4 order.
    pub fn stream(&self, i: usize) -> &Tensor<T> {
        if i == 0 {
            &self.whole
        } else {
            &self.quadrants[i - 1]
        }
    }

    pub fn cast<U: Real>(&self) -> StreamSet<U> {
        StreamSet {
            whole: self.whole.cast(),
            quadrants: [
                self.quadrants[0].cast(),
                self.quadrants[1].cast(),
                self.quadrants[2].cast(),
                self.quadrants[3].cast(),
            ],
        }
    }
}

/// Row/column offsets of the four quadrants, in X1..X4 order.
pub fn quadrant_offsets(side: usize) -> [(usize, usize); 4] {
    let half = side / 2;
    [(0, 0), (0, half), (half, 0), (half, half)]
}

fn check_square_even(op: &'static str, whole: &Tensor<f64>) -> Result<(usize, usize)> {
    let s = whole.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape(op, s, &[3]));
    }
    if s[1] % 2 != 0 {
        return Err(Error::invalid("image side", alloc::format!("{} is odd", s[1])));
    }
    Ok((s[0], s[1]))
}

/// The four `S/2 x S/2` sub-grids of `whole`, before any resampling.
pub fn quadrant_slices(whole: &Tensor<f64>) -> Result<[Tensor<f64>; 4]> {
    let (c, side) = check_square_even("quadrant_slices", whole)?;
    let half = side / 2;
    let src = whole.data();
    let slice = |(r0, c0): (usize, usize)| {
        let mut out = Vec::with_capacity(c * half * half);
        for ch in 0..c {
            for r in r0..r0 + half {
                let base = (ch * side + r) * side + c0;
                out.extend_from_slice(&src[base..base + half]);
            }
        }
        Tensor::new([c, half, half], out)
    };
    let [a, b, cc, d] = quadrant_offsets(side);
    Ok([slice(a)?, slice(b)?, slice(cc)?, slice(d)?])
}

/// Splits a square crop into X0..X4, each `C x S x S`.
pub fn split_quadrants(whole: &Tensor<f64>) -> Result<StreamSet> {
    let (_, side) = check_square_even("split_quadrants", whole)?;
    let [a, b, c, d] = quadrant_slices(whole)?;
    Ok(StreamSet {
        whole: whole.clone(),
        quadrants: [resize(&a, side)?, resize(&b, side)?, resize(&c, side)?, resize(&d, side)?],
    })
}

/// Full pipeline: expand the box, crop and resample to `size`, split.
pub fn preprocess(image: &Tensor<f64>, face: &FaceBox, size: usize) -> Result<StreamSet> {
    if size < 16 || size % 2 != 0 {
        return Err(Error::invalid("output size", alloc::format!("{size} must be even and at least 16")));
    }
    let crop = crop_resize(image, &expand_box(face), size)?;
    split_quadrants(&crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new([c, h, w], (0..c * h * w).map(|v| v as f64 / 7.0).collect()).unwrap()
    }

    #[test]
    fn expand_box_examples() {
        let b = expand_box(&FaceBox::new(10.0, 20.0, 50.0, 80.0).unwrap());
        assert_eq!(b, FaceBox { x: -9.0, y: 16.0, w: 88.0, h: 88.0 });
        let b = expand_box(&FaceBox::new(0.0, 0.0, 100.0, 100.0).unwrap());
        assert_eq!(b, FaceBox { x: -5.0, y: -5.0, w: 110.0, h: 110.0 });
        let sq = FaceBox::new(3.0, 4.0, 20.0, 20.0).unwrap();
        let e = expand_box(&sq);
        assert_eq!(e.w, 22.0);
        assert_eq!(e.center(), sq.center());
    }

    #[test]
    fn invalid_boxes() {
        assert!(FaceBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(FaceBox::new(0.0, 0.0, 5.0, -1.0).is_err());
        let img = ramp(3, 4, 4);
        let bad = FaceBox { x: 0.0, y: 0.0, w: 0.0, h: 2.0 };
        assert!(crop_resize(&img, &bad, 4).is_err());
    }

    #[test]
    fn aligned_crop_is_identity() {
        let img = ramp(3, 20, 24);
        let b = FaceBox::new(5.0, 3.0, 16.0, 16.0).unwrap();
        let out = crop_resize(&img, &b, 16).unwrap();
        for ch in 0..3 {
            for r in 0..16 {
                for c in 0..16 {
                    assert_eq!(out.data()[(ch * 16 + r) * 16 + c], img.data()[(ch * 20 + r + 3) * 24 + c + 5]);
                }
            }
        }
    }

    #[test]
    fn crop_outside_frame_is_zero() {
        let img = ramp(3, 8, 8);
        let b = FaceBox::new(100.0, -50.0, 6.0, 6.0).unwrap();
        assert!(crop_resize(&img, &b, 4).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_upsample_golden() {
        // Scalar reference: clamp(src) with half-pixel centres on [0,1;1,0]
        // gives v = x + y - 2xy at positions {0, .25, .75, 1}.
        let img = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize(&img, 4).unwrap();
        let golden = [
            0.0, 0.25, 0.75, 1.0, //
            0.25, 0.375, 0.625, 0.75, //
            0.75, 0.625, 0.375, 0.25, //
            1.0, 0.75, 0.25, 0.0,
        ];
        assert_eq!(out.data(), &golden);
    }

    #[test]
    fn split_constant_and_distinct_quadrants() {
        let c = Tensor::full([3, 8, 8], 0.3);
        let s = split_quadrants(&c).unwrap();
        for q in &s.quadrants {
            assert!(q.data().iter().all(|&v| v == 0.3));
        }
        let mut data = vec![0.0; 3 * 8 * 8];
        for ch in 0..3 {
            for r in 0..8 {
                for col in 0..8 {
                    data[(ch * 8 + r) * 8 + col] = 1.0 + (r >= 4) as u8 as f64 * 2.0 + (col >= 4) as u8 as f64;
                }
            }
        }
        let s = split_quadrants(&Tensor::new([3, 8, 8], data).unwrap()).unwrap();
        for (k, q) in s.quadrants.iter().enumerate() {
            assert_eq!(q.shape(), &[3, 8, 8]);
            assert!(q.data().iter().all(|&v| v == (k + 1) as f64));
        }
    }

    #[test]
    fn odd_side_is_rejected() {
        assert!(split_quadrants(&ramp(3, 5, 5)).is_err());
        assert!(preprocess(&ramp(3, 40, 40), &FaceBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 17).is_err());
    }

    #[test]
    fn select_face_rules() {
        let a = FaceBox::new(-1.0, -1.0, 2.0, 2.0).unwrap();
        let b = FaceBox::new(9.0, 9.0, 2.0, 2.0).unwrap();
        assert_eq!(select_face(&[a], (50.0, 50.0)).unwrap(), a);
        assert_eq!(select_face(&[a, b], (1.0, 1.0)).unwrap(), a);
        assert_eq!(select_face(&[b, a], (5.0, 5.0)).unwrap(), b);
        assert!(select_face(&[], (0.0, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn expand_box_square_and_centred(x in -500i32..500, y in -500i32..500, w in 1u32..400, h in 1u32..400) {
            let b = FaceBox::new(x as f64, y as f64, w as f64, h as f64).unwrap();
            let e = expand_box(&b);
            prop_assert_eq!(e.w, e.h);
            prop_assert_eq!(e.center(), b.center());
        }

        #[test]
        fn quadrants_partition_the_crop(seed in any::<u32>()) {
            let side = 4;
            let vals: Vec<f64> = (0..3 * side * side).map(|i| ((i as u64 * 2654435761 + seed as u64) % 1000) as f64 / 1000.0).collect();
            let whole = Tensor::new([3, side, side], vals).unwrap();
            let qs = quadrant_slices(&whole).unwrap();
            let mut hits = vec![0u8; 3 * side * side];
            for (k, (r0, c0)) in quadrant_offsets(side).into_iter().enumerate() {
                for ch in 0..3 {
                    for r in 0..side / 2 {
                        for c in 0..side / 2 {
                            let src = (ch * side + r0 + r) * side + c0 + c;
                            hits[src] += 1;
                            prop_assert_eq!(qs[k].data()[(ch * 2 + r) * 2 + c], whole.data()[src]);
                        }
                    }
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }
    }
}
