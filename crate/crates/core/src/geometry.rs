//! Boxes, crops, score grids and the dense box parameterization.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner;
//! a pixel index p covers [p, p+1). Boxes carry a compile-time frame marker so
//! image-frame and patch-frame quantities cannot be mixed up silently.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::marker::PhantomData;

/// Frame marker: original image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageFrame;
/// Frame marker: resampled search-patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchFrame;

#[derive(Debug, Serialize, Deserialize)]
pub struct Box2<F> {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(skip)]
    _frame: PhantomData<F>,
}

// manual impls keep the marker out of the derive bounds
impl<F> Clone for Box2<F> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<F> Copy for Box2<F> {}
impl<F> PartialEq for Box2<F> {
    fn eq(&self, other: &Self) -> bool {
        self.x == other.x && self.y == other.y && self.w == other.w && self.h == other.h
    }
}

pub type ImageBox = Box2<ImageFrame>;
pub type PatchBox = Box2<PatchFrame>;

impl<F> Box2<F> {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Box2 {
            x,
            y,
            w,
            h,
            _frame: PhantomData,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    /// √(w·h), the side of the equal-area square.
    pub fn base_size(&self) -> f64 {
        (self.w * self.h).sqrt()
    }
}

pub fn iou<F>(a: &Box2<F>, b: &Box2<F>) -> f64 {
    let ix = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    // ratio can drift above 1 for identical boxes because the intersection
    // sides are computed as (x+w)-x; the true value never exceeds 1
    (inter / union).min(1.0)
}

/// IoU minus the hull penalty; in (−1, 1], equal to IoU when the hull adds
/// no area beyond the union.
pub fn giou<F>(a: &Box2<F>, b: &Box2<F>) -> f64 {
    let ix = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let hx = a.x2().max(b.x2()) - a.x.min(b.x);
    let hy = a.y2().max(b.y2()) - a.y.min(b.y);
    let hull = hx * hy;
    if union <= 0.0 || hull <= 0.0 {
        return -1.0;
    }
    inter / union - (hull - union) / hull
}

pub fn center_distance<F>(a: &Box2<F>, b: &Box2<F>) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// Affine patch→image map of a square crop: img = offset + scale · patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub out_px: usize,
}

impl CropTransform {
    pub fn patch_to_image_pt(&self, x: f64, y: f64) -> (f64, f64) {
        (self.offset_x + self.scale * x, self.offset_y + self.scale * y)
    }

    pub fn image_to_patch_pt(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.offset_x) / self.scale, (y - self.offset_y) / self.scale)
    }

    pub fn to_patch(&self, b: &ImageBox) -> PatchBox {
        let (x, y) = self.image_to_patch_pt(b.x, b.y);
        Box2::new(x, y, b.w / self.scale, b.h / self.scale)
    }

    pub fn to_image(&self, b: &PatchBox) -> ImageBox {
        let (x, y) = self.patch_to_image_pt(b.x, b.y);
        Box2::new(x, y, b.w * self.scale, b.h * self.scale)
    }
}

/// Square region of side `factor·√(w·h)` centered on the target, mapped onto
/// an `out_px`-sided patch.
pub fn make_crop(target: &ImageBox, factor: f64, out_px: usize) -> Result<CropTransform> {
    if !target.is_valid() {
        return Err(Error::InvalidArgument(format!(
            "degenerate crop target {}x{}",
            target.w, target.h
        )));
    }
    if factor <= 1.0 || out_px == 0 {
        return Err(Error::InvalidArgument("crop factor must exceed 1".into()));
    }
    let side = factor * target.base_size();
    let (cx, cy) = target.center();
    Ok(CropTransform {
        scale: side / out_px as f64,
        offset_x: cx - side / 2.0,
        offset_y: cy - side / 2.0,
        out_px,
    })
}

/// Resamples the crop region of a (3,H,W) image into (3,out,out) with
/// bilinear interpolation. Samples outside the image replicate the nearest
/// edge pixel; the returned mask is true where the sample center fell outside.
pub fn extract_patch(image: &Array3<f64>, crop: &CropTransform) -> (Array3<f64>, Array2<bool>) {
    let (ch, h, w) = image.dim();
    let n = crop.out_px;
    let mut out = Array3::<f64>::zeros((ch, n, n));
    let mut padded = Array2::<bool>::default((n, n));
    for i in 0..n {
        for j in 0..n {
            let (sx, sy) = crop.patch_to_image_pt(j as f64 + 0.5, i as f64 + 0.5);
            padded[(i, j)] = sx < 0.0 || sx >= w as f64 || sy < 0.0 || sy >= h as f64;
            // bilinear in pixel-center space, clamped at the borders
            let tx = sx - 0.5;
            let ty = sy - 0.5;
            let x0 = tx.floor();
            let y0 = ty.floor();
            let fx = tx - x0;
            let fy = ty - y0;
            let xi0 = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let xi1 = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            let yi0 = (y0 as isize).clamp(0, h as isize - 1) as usize;
            let yi1 = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
            for c in 0..ch {
                let v00 = image[(c, yi0, xi0)];
                let v01 = image[(c, yi0, xi1)];
                let v10 = image[(c, yi1, xi0)];
                let v11 = image[(c, yi1, xi1)];
                out[(c, i, j)] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    (out, padded)
}

/// Patch-pixel coordinate of feature cell j at stride s.
pub fn remap(j: usize, stride: usize) -> f64 {
    (stride / 2 + stride * j) as f64
}

/// Dense score grid at a fixed stride.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub values: Array2<f64>,
    pub stride: usize,
}

impl ScoreMap {
    pub fn new(values: Array2<f64>, stride: usize) -> Self {
        ScoreMap { values, stride }
    }

    /// Highest-scoring cell; ties resolve to the first cell in row-major
    /// order so the result is deterministic.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Gaussian regression target centered on a box.
#[derive(Debug, Clone)]
pub struct GaussianLabel {
    pub values: Array2<f64>,
    pub peak: (usize, usize),
}

pub const SIGMA_RATIO: f64 = 0.25;

/// Per-cell Gaussian `exp(−‖k−c‖²/2σ²)` over the remapped grid, with
/// σ = `sigma_ratio`·√(w·h) of the patch-frame box.
pub fn gaussian_label(
    b: &PatchBox,
    h: usize,
    w: usize,
    stride: usize,
    sigma_ratio: f64,
) -> Result<GaussianLabel> {
    if !b.is_valid() {
        return Err(Error::InvalidArgument("degenerate label box".into()));
    }
    let sigma = sigma_ratio * b.base_size();
    let (cx, cy) = b.center();
    let denom = 2.0 * sigma * sigma;
    let mut values = Array2::<f64>::zeros((h, w));
    let mut peak = (0, 0);
    let mut peak_d2 = f64::INFINITY;
    for r in 0..h {
        let ky = remap(r, stride);
        for c in 0..w {
            let kx = remap(c, stride);
            let d2 = (kx - cx).powi(2) + (ky - cy).powi(2);
            values[(r, c)] = (-d2 / denom).exp();
            if d2 < peak_d2 {
                peak_d2 = d2;
                peak = (r, c);
            }
        }
    }
    Ok(GaussianLabel { values, peak })
}

/// Per-cell distances to the four box sides, each normalized by the patch
/// extent. Stored channel-first as (4,H,W) in l,t,r,b order.
#[derive(Debug, Clone)]
pub struct DenseLtrb {
    pub values: Array3<f64>,
    pub stride: usize,
}

/// The ltrb vector of one location (not necessarily on the grid).
pub fn ltrb_at(kx: f64, ky: f64, b: &PatchBox, wim: f64, him: f64) -> [f64; 4] {
    [
        (kx - b.x) / wim,
        (ky - b.y) / him,
        (b.x2() - kx) / wim,
        (b.y2() - ky) / him,
    ]
}

pub fn encode_ltrb(b: &PatchBox, h: usize, w: usize, stride: usize) -> DenseLtrb {
    let wim = (stride * w) as f64;
    let him = (stride * h) as f64;
    let mut values = Array3::<f64>::zeros((4, h, w));
    for r in 0..h {
        let ky = remap(r, stride);
        for c in 0..w {
            let kx = remap(c, stride);
            let d = ltrb_at(kx, ky, b, wim, him);
            for (ch, &v) in d.iter().enumerate() {
                values[(ch, r, c)] = v;
            }
        }
    }
    DenseLtrb { values, stride }
}

/// Reads the box back out of a dense field at one cell; the exact inverse of
/// [`encode_ltrb`] at that cell.
pub fn decode_ltrb(d: &DenseLtrb, cell: (usize, usize), h: usize, w: usize) -> Result<PatchBox> {
    let (r, c) = cell;
    let stride = d.stride;
    let wim = (stride * w) as f64;
    let him = (stride * h) as f64;
    let kx = remap(c, stride);
    let ky = remap(r, stride);
    let (l, t, rr, bb) = (
        d.values[(0, r, c)],
        d.values[(1, r, c)],
        d.values[(2, r, c)],
        d.values[(3, r, c)],
    );
    let bw = (l + rr) * wim;
    let bh = (t + bb) * him;
    if bw <= 0.0 || bh <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "decoded box has nonpositive size {bw}x{bh}"
        )));
    }
    Ok(Box2::new(kx - l * wim, ky - t * him, bw, bh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn remap_known_values() {
        assert_eq!(remap(0, 16), 8.0);
        assert_eq!(remap(17, 16), 280.0);
        for j in 0..20 {
            assert_eq!(remap(j, 1), j as f64);
        }
    }

    #[test]
    fn ltrb_symmetric_center_case() {
        let b: PatchBox = Box2::new(108.0, 108.0, 72.0, 72.0);
        let d = ltrb_at(144.0, 144.0, &b, 288.0, 288.0);
        for v in d {
            assert_eq!(v, 0.125);
        }
    }

    #[test]
    fn ltrb_grid_center_case_and_edge_zero() {
        // box centered on grid cell (8,8) -> k=(136,136)
        let b: PatchBox = Box2::new(100.0, 100.0, 72.0, 72.0);
        let enc = encode_ltrb(&b, 18, 18, 16);
        for ch in 0..4 {
            assert_eq!(enc.values[(ch, 8, 8)], 0.125);
        }
        // cell sitting exactly on the left box edge -> l = 0
        let b: PatchBox = Box2::new(136.0, 100.0, 50.0, 50.0);
        let enc = encode_ltrb(&b, 18, 18, 16);
        assert_eq!(enc.values[(0, 0, 8)], 0.0);
    }

    #[test]
    fn ltrb_matches_scalar_recomputation() {
        let b: PatchBox = Box2::new(37.5, 91.25, 140.0, 55.5);
        let enc = encode_ltrb(&b, 18, 18, 16);
        for r in 0..18 {
            for c in 0..18 {
                let d = ltrb_at(remap(c, 16), remap(r, 16), &b, 288.0, 288.0);
                for ch in 0..4 {
                    assert_eq!(enc.values[(ch, r, c)], d[ch]);
                }
            }
        }
    }

    #[test]
    fn ltrb_decode_inverts_encode() {
        let b: PatchBox = Box2::new(108.0, 108.0, 72.0, 72.0);
        let enc = encode_ltrb(&b, 18, 18, 16);
        for cell in [(0, 0), (8, 8), (17, 17), (3, 11)] {
            let back = decode_ltrb(&enc, cell, 18, 18).unwrap();
            assert_abs_diff_eq!(back.x, b.x, epsilon = 1e-9);
            assert_abs_diff_eq!(back.y, b.y, epsilon = 1e-9);
            assert_abs_diff_eq!(back.w, b.w, epsilon = 1e-9);
            assert_abs_diff_eq!(back.h, b.h, epsilon = 1e-9);
        }
    }

    #[test]
    fn decode_rejects_nonpositive_size() {
        let mut d = DenseLtrb {
            values: Array3::zeros((4, 18, 18)),
            stride: 16,
        };
        d.values[(0, 5, 5)] = -0.2;
        d.values[(2, 5, 5)] = 0.1;
        d.values[(1, 5, 5)] = 0.3;
        d.values[(3, 5, 5)] = 0.3;
        assert!(decode_ltrb(&d, (5, 5), 18, 18).is_err());
    }

    #[test]
    fn iou_giou_known_values() {
        let a: ImageBox = Box2::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        let b: ImageBox = Box2::new(1.0, 1.0, 2.0, 2.0);
        assert_abs_diff_eq!(iou(&a, &b), 1.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(giou(&a, &b), 1.0 / 7.0 - 2.0 / 9.0, epsilon = 1e-12);
        // far-apart boxes drive giou toward -1
        let far: ImageBox = Box2::new(1e6, 1e6, 2.0, 2.0);
        assert_eq!(iou(&a, &far), 0.0);
        assert!(giou(&a, &far) < -0.999);
    }

    #[test]
    fn crop_known_geometry() {
        let t: ImageBox = Box2::new(100.0, 100.0, 40.0, 40.0);
        let crop = make_crop(&t, 5.0, 288).unwrap();
        // side 200 centered at (120,120)
        assert_abs_diff_eq!(crop.scale * 288.0, 200.0, epsilon = 1e-12);
        assert_abs_diff_eq!(crop.offset_x, 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(crop.offset_y, 20.0, epsilon = 1e-12);
        let (cx, cy) = crop.patch_to_image_pt(144.0, 144.0);
        assert_abs_diff_eq!(cx, 120.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cy, 120.0, epsilon = 1e-12);
    }

    #[test]
    fn crop_rejects_degenerate() {
        let t: ImageBox = Box2::new(0.0, 0.0, 0.0, 10.0);
        assert!(make_crop(&t, 5.0, 288).is_err());
        let t: ImageBox = Box2::new(0.0, 0.0, 10.0, 10.0);
        assert!(make_crop(&t, 0.5, 288).is_err());
    }

    #[test]
    fn extract_patch_padded_pixel_count() {
        // 100x100 image, corner target: crop side 200 from (-80,-80),
        // 50px patch -> sample x = -78 + 4j, in-image for j in 20..=44,
        // so 2500 - 25*25 = 1875 padded samples.
        let img = Array3::<f64>::from_elem((3, 100, 100), 0.5);
        let t: ImageBox = Box2::new(0.0, 0.0, 40.0, 40.0);
        let crop = make_crop(&t, 5.0, 50).unwrap();
        let (patch, mask) = extract_patch(&img, &crop);
        let padded = mask.iter().filter(|&&m| m).count();
        assert_eq!(padded, 1875);
        // replicate fill keeps the constant image constant
        for v in patch.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn extract_patch_interior_needs_no_padding() {
        let img = Array3::<f64>::zeros((3, 400, 400));
        let t: ImageBox = Box2::new(180.0, 180.0, 40.0, 40.0);
        let crop = make_crop(&t, 5.0, 50).unwrap();
        let (_, mask) = extract_patch(&img, &crop);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn gaussian_label_centered_on_cell_peaks_at_one() {
        // center (136,136) = grid cell (8,8) at stride 16
        let b: PatchBox = Box2::new(100.0, 100.0, 72.0, 72.0);
        let lab = gaussian_label(&b, 18, 18, 16, SIGMA_RATIO).unwrap();
        assert_eq!(lab.peak, (8, 8));
        assert_eq!(lab.values[(8, 8)], 1.0);
        for v in lab.values.iter() {
            assert!(*v > 0.0 && *v <= 1.0);
        }
    }

    #[test]
    fn gaussian_label_wider_sigma_raises_off_center_value() {
        let b: PatchBox = Box2::new(90.0, 90.0, 60.0, 60.0);
        let narrow = gaussian_label(&b, 18, 18, 16, 0.25).unwrap();
        let wide = gaussian_label(&b, 18, 18, 16, 0.5).unwrap();
        assert!(wide.values[(2, 2)] > narrow.values[(2, 2)]);
    }

    #[test]
    fn score_map_argmax_tie_breaks_row_major() {
        let mut v = Array2::<f64>::zeros((4, 4));
        v[(2, 1)] = 3.0;
        v[(1, 3)] = 3.0;
        let sm = ScoreMap::new(v, 16);
        assert_eq!(sm.argmax_cell(), (1, 3));
        assert_eq!(sm.max_value(), 3.0);
    }

    proptest! {
        #[test]
        fn prop_ltrb_round_trip_exact(
            x in -50.0..250.0f64,
            y in -50.0..250.0f64,
            w in 1.0..200.0f64,
            h in 1.0..200.0f64,
            r in 0usize..18,
            c in 0usize..18,
        ) {
            let b: PatchBox = Box2::new(x, y, w, h);
            let enc = encode_ltrb(&b, 18, 18, 16);
            let back = decode_ltrb(&enc, (r, c), 18, 18).unwrap();
            prop_assert!((back.x - b.x).abs() <= 1e-9);
            prop_assert!((back.y - b.y).abs() <= 1e-9);
            prop_assert!((back.w - b.w).abs() <= 1e-9);
            prop_assert!((back.h - b.h).abs() <= 1e-9);
        }

        #[test]
        fn prop_iou_giou_relations(
            ax in -10.0..10.0f64, ay in -10.0..10.0f64,
            aw in 0.5..20.0f64, ah in 0.5..20.0f64,
            bx in -10.0..10.0f64, by in -10.0..10.0f64,
            bw in 0.5..20.0f64, bh in 0.5..20.0f64,
        ) {
            let a: ImageBox = Box2::new(ax, ay, aw, ah);
            let b: ImageBox = Box2::new(bx, by, bw, bh);
            let i = iou(&a, &b);
            let gi = giou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(gi > -1.0 && gi <= 1.0);
            prop_assert!(gi <= i + 1e-12);
            prop_assert!((iou(&b, &a) - i).abs() < 1e-12);
            prop_assert!((giou(&b, &a) - gi).abs() < 1e-12);
        }

        #[test]
        fn prop_containment_makes_giou_equal_iou(
            x in -10.0..10.0f64, y in -10.0..10.0f64,
            w in 2.0..20.0f64, h in 2.0..20.0f64,
            fx in 0.0..0.5f64, fy in 0.0..0.5f64,
            fw in 0.1..0.5f64, fh in 0.1..0.5f64,
        ) {
            let outer: ImageBox = Box2::new(x, y, w, h);
            let inner: ImageBox = Box2::new(x + fx * w, y + fy * h, w * fw, h * fh);
            // hull == union when one box contains the other
            prop_assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-12);
        }

        #[test]
        fn prop_crop_inverse_identity(
            x in 0.0..500.0f64, y in 0.0..500.0f64,
            w in 4.0..80.0f64, h in 4.0..80.0f64,
            px in 0.0..288.0f64, py in 0.0..288.0f64,
        ) {
            let t: ImageBox = Box2::new(x, y, w, h);
            let crop = make_crop(&t, 5.0, 288).unwrap();
            let (ix, iy) = crop.patch_to_image_pt(px, py);
            let (bx, by) = crop.image_to_patch_pt(ix, iy);
            prop_assert!((bx - px).abs() <= 1e-9);
            prop_assert!((by - py).abs() <= 1e-9);
            let pb = crop.to_patch(&t);
            let back = crop.to_image(&pb);
            prop_assert!((back.x - t.x).abs() <= 1e-9);
            prop_assert!((back.w - t.w).abs() <= 1e-9);
        }

        #[test]
        fn prop_gaussian_peak_is_nearest_cell(
            cx in 20.0..268.0f64, cy in 20.0..268.0f64,
            w in 20.0..120.0f64, h in 20.0..120.0f64,
        ) {
            let b: PatchBox = Box2::from_center(cx, cy, w, h);
            let lab = gaussian_label(&b, 18, 18, 16, SIGMA_RATIO).unwrap();
            let mut best = (0usize, 0usize);
            let mut best_d = f64::INFINITY;
            for r in 0..18 {
                for c in 0..18 {
                    let d = (remap(c, 16) - cx).powi(2) + (remap(r, 16) - cy).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = (r, c);
                    }
                }
            }
            prop_assert_eq!(lab.peak, best);
            let max_cell = ScoreMap::new(lab.values.clone(), 16).argmax_cell();
            prop_assert_eq!(max_cell, best);
        }
    }
}
