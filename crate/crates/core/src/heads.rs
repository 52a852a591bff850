//! Applying predicted model weights to test-frame features.
//!
//! The classifier weight acts as a 1×1 correlation filter over the feature
//! cells; the box-regressor weight first forms an attention map that gates
//! the features before a small CNN emits the dense ltrb field.

use crate::encoding::Tokens;
use crate::geometry::{decode_ltrb, CropTransform, DenseLtrb, ImageBox, ScoreMap};
use crate::graph::{Graph, TensorId};
use crate::nn::{Binder, ColNorm, Conv2dLayer, ParamStore};
use ndarray::{Array2, Array3, Ix2, Ix3};
use rand_chacha::ChaCha12Rng;

/// Per-cell inner product ⟨w_cls, z_test[cell]⟩; returns an (H·W, 1) column.
pub fn target_scores(g: &mut Graph, w_cls: TensorId, z_test: &Tokens) -> TensorId {
    g.matmul_nt(z_test.id, w_cls)
}

/// Materializes an in-graph (H·W,1) score column as a [`ScoreMap`].
pub fn scores_to_map(g: &Graph, scores: TensorId, h: usize, w: usize, stride: usize) -> ScoreMap {
    let v = g.value(scores).view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(v.nrows(), h * w);
    let values = Array2::from_shape_fn((h, w), |(r, c)| v[(r * w + c, 0)]);
    ScoreMap::new(values, stride)
}

/// Four conv+instance-norm+rectifier blocks, then a conv to four channels
/// whose exponential keeps every side distance positive.
#[derive(Debug, Clone)]
pub struct BoxHead {
    blocks: Vec<(Conv2dLayer, ColNorm)>,
    final_conv: Conv2dLayer,
    pub width: usize,
}

impl BoxHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_width: usize,
        width: usize,
    ) -> Self {
        let mut blocks = Vec::with_capacity(4);
        let mut cin = in_width;
        for i in 0..4 {
            let conv = Conv2dLayer::init(store, rng, &format!("{name}.c{i}"), cin, width, 3, 1, 1);
            let norm = ColNorm::init(store, &format!("{name}.n{i}"), width);
            blocks.push((conv, norm));
            cin = width;
        }
        let final_conv = Conv2dLayer::init(store, rng, &format!("{name}.out"), width, 4, 3, 1, 1);
        BoxHead {
            blocks,
            final_conv,
            width,
        }
    }

    /// x (Cin,H,W) -> (4,H,W), strictly positive.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: TensorId) -> TensorId {
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let mut cur = x;
        for (conv, norm) in &self.blocks {
            cur = conv.forward(g, b, cur);
            // instance norm: per channel over the spatial cells
            let flat = g.reshape(cur, &[self.width, h * w]);
            let cells = g.transpose2(flat);
            let normed = norm.forward(g, b, cells);
            let back = g.transpose2(normed);
            cur = g.reshape(back, &[self.width, h, w]);
            cur = g.relu(cur);
        }
        let out = self.final_conv.forward(g, b, cur);
        g.exp(out)
    }
}

/// Attention-gated dense box regression: a = ⟨w_bbreg, z[cell]⟩ gates the
/// features cell-wise before the head CNN.
pub fn regress_boxes(
    g: &mut Graph,
    b: &mut Binder,
    w_bbreg: TensorId,
    z_test: &Tokens,
    head: &BoxHead,
) -> TensorId {
    let (h, w) = (z_test.h, z_test.w);
    let attn_col = g.matmul_nt(z_test.id, w_bbreg);
    let attn = g.reshape(attn_col, &[h * w]);
    let gated = g.row_scale(z_test.id, attn);
    let chan_major = g.transpose2(gated);
    let width = g.value(z_test.id).shape()[1];
    let maps = g.reshape(chan_major, &[width, h, w]);
    head.forward(g, b, maps)
}

/// Materializes an in-graph (4,H,W) field as a [`DenseLtrb`].
pub fn ltrb_to_field(g: &Graph, ltrb: TensorId, stride: usize) -> DenseLtrb {
    let v = g
        .value(ltrb)
        .view()
        .into_dimensionality::<Ix3>()
        .unwrap()
        .to_owned();
    DenseLtrb { values: v, stride }
}

/// Peak cell → box through the dense field and crop inverse. Confidence is
/// the raw maximum score; a non-decodable field at the peak yields no box.
pub fn decode_prediction(
    scores: &ScoreMap,
    d: &DenseLtrb,
    crop: &CropTransform,
) -> (Option<ImageBox>, f64) {
    let cell = scores.argmax_cell();
    let conf = scores.values[cell];
    let (h, w) = scores.values.dim();
    match decode_ltrb(d, cell, h, w) {
        Ok(patch_box) => (Some(crop.to_image(&patch_box)), conf),
        Err(_) => (None, conf),
    }
}

/// Brute-force helper used by verification: full-scan argmax.
pub fn scan_argmax(values: &Array2<f64>) -> ((usize, usize), f64) {
    let mut best = (0, 0);
    let mut bv = f64::NEG_INFINITY;
    for ((r, c), &v) in values.indexed_iter() {
        if v > bv {
            bv = v;
            best = (r, c);
        }
    }
    (best, bv)
}

/// Converts a (3,H,W) float image in [0,1] to the backbone's input layout.
/// Exists so callers share one definition of the patch tensor.
pub fn patch_to_input(patch: &Array3<f64>) -> ndarray::ArrayD<f64> {
    patch.clone().into_dyn()
}
