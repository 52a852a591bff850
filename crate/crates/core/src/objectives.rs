//! Training losses and the gradient-verification harness.
//!
//! Classification uses a hinged squared error: foreground cells (label above
//! the threshold) regress the Gaussian label directly, background cells are
//! only penalized for positive responses. Box regression penalizes 1−GIoU
//! between the predicted and target boxes reconstructed at each foreground
//! cell. The total is a weighted sum of the two.

use crate::geometry::{decode_ltrb, remap, DenseLtrb};
use crate::graph::{Graph, TensorId};
use crate::nn::{Binder, ParamStore};
use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_giou: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 100.0,
            lambda_giou: 1.0,
            tau: 0.05,
        }
    }
}

/// Cells whose label exceeds the foreground threshold, flat row-major.
pub fn fg_cells(label_flat: &Array1<f64>, tau: f64) -> Vec<usize> {
    label_flat
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > tau)
        .map(|(i, _)| i)
        .collect()
}

/// Hinged squared-error classification loss over all cells.
/// `scores` is the (H·W,1) prediction column; `label` the flat Gaussian.
pub fn loss_cls(g: &mut Graph, scores: TensorId, label: &Array1<f64>, tau: f64) -> TensorId {
    let n = label.len();
    assert_eq!(g.value(scores).len(), n, "score/label size mismatch");
    let pred = g.reshape(scores, &[n]);
    let fg: ArrayD<f64> = label
        .mapv(|y| if y > tau { 1.0 } else { 0.0 })
        .into_dyn();
    let bg = fg.mapv(|m| 1.0 - m);
    let fg_id = g.input(fg);
    let bg_id = g.input(bg);
    let lab_id = g.input(label.clone().into_dyn());
    let diff = g.sub(pred, lab_id);
    let fg_term = g.mul(fg_id, diff);
    let pos = g.relu(pred);
    let bg_term = g.mul(bg_id, pos);
    let r = g.add(fg_term, bg_term);
    let r2 = g.mul(r, r);
    g.mean_all(r2)
}

/// Plain-value twin of [`loss_cls`] for optimizer code that does not build a
/// tape. `pred` and `label` must be the same shape.
pub fn loss_cls_value(pred: &Array2<f64>, label: &Array2<f64>, tau: f64) -> f64 {
    assert_eq!(pred.dim(), label.dim());
    let mut acc = 0.0;
    for (&p, &y) in pred.iter().zip(label.iter()) {
        let r = if y > tau { p - y } else { p.max(0.0) };
        acc += r * r;
    }
    acc / pred.len() as f64
}

/// Mean (1 − GIoU) over foreground cells between boxes reconstructed from
/// the in-graph prediction and the ground-truth field. Returns `None` on an
/// empty foreground set (the loss is defined as zero there; callers may want
/// to log it).
pub fn loss_giou(
    g: &mut Graph,
    pred: TensorId,
    gt: &DenseLtrb,
    fg: &[usize],
    h: usize,
    w: usize,
) -> Option<TensorId> {
    if fg.is_empty() {
        return None;
    }
    let stride = gt.stride;
    let wim = (stride * w) as f64;
    let him = (stride * h) as f64;
    let f = fg.len();

    let flat = g.reshape(pred, &[4, h * w]);
    let cells = g.transpose2(flat);
    let picked = g.gather_rows(cells, fg);
    let l = g.slice_cols(picked, 0, 1);
    let t = g.slice_cols(picked, 1, 2);
    let r = g.slice_cols(picked, 2, 3);
    let b = g.slice_cols(picked, 3, 4);

    let mut kx = Array2::<f64>::zeros((f, 1));
    let mut ky = Array2::<f64>::zeros((f, 1));
    let mut gx1 = Array2::<f64>::zeros((f, 1));
    let mut gy1 = Array2::<f64>::zeros((f, 1));
    let mut gx2 = Array2::<f64>::zeros((f, 1));
    let mut gy2 = Array2::<f64>::zeros((f, 1));
    let mut garea = Array2::<f64>::zeros((f, 1));
    for (i, &cell) in fg.iter().enumerate() {
        let (row, col) = (cell / w, cell % w);
        kx[(i, 0)] = remap(col, stride);
        ky[(i, 0)] = remap(row, stride);
        let gb = decode_ltrb(gt, (row, col), h, w)
            .expect("ground-truth field must decode to a valid box");
        gx1[(i, 0)] = gb.x;
        gy1[(i, 0)] = gb.y;
        gx2[(i, 0)] = gb.x2();
        gy2[(i, 0)] = gb.y2();
        garea[(i, 0)] = gb.area();
    }
    let kx = g.input(kx.into_dyn());
    let ky = g.input(ky.into_dyn());
    let gx1 = g.input(gx1.into_dyn());
    let gy1 = g.input(gy1.into_dyn());
    let gx2 = g.input(gx2.into_dyn());
    let gy2 = g.input(gy2.into_dyn());
    let garea = g.input(garea.into_dyn());

    let lw = g.scale(l, wim);
    let rw = g.scale(r, wim);
    let th = g.scale(t, him);
    let bh = g.scale(b, him);
    let x1 = g.sub(kx, lw);
    let x2 = g.add(kx, rw);
    let y1 = g.sub(ky, th);
    let y2 = g.add(ky, bh);

    let pw = g.sub(x2, x1);
    let ph = g.sub(y2, y1);
    let parea = g.mul(pw, ph);

    let ix1 = g.maximum(x1, gx1);
    let iy1 = g.maximum(y1, gy1);
    let ix2 = g.minimum(x2, gx2);
    let iy2 = g.minimum(y2, gy2);
    let iw_raw = g.sub(ix2, ix1);
    let ih_raw = g.sub(iy2, iy1);
    // clamps only bind for disjoint boxes; exp-activated predictions keep
    // positive extent so training gradients never sit on the clamp corner
    let iw = g.relu(iw_raw);
    let ih = g.relu(ih_raw);
    let inter = g.mul(iw, ih);

    let areas = g.add(parea, garea);
    let union = g.sub(areas, inter);

    let hx1 = g.minimum(x1, gx1);
    let hy1 = g.minimum(y1, gy1);
    let hx2 = g.maximum(x2, gx2);
    let hy2 = g.maximum(y2, gy2);
    let hw = g.sub(hx2, hx1);
    let hh = g.sub(hy2, hy1);
    let hull = g.mul(hw, hh);

    let iou = g.div(inter, union);
    let excess = g.sub(hull, union);
    let penalty = g.div(excess, hull);
    let giou = g.sub(iou, penalty);
    let neg = g.scale(giou, -1.0);
    let one_minus = g.add_const(neg, 1.0);
    Some(g.mean_all(one_minus))
}

/// λ_cls·L_cls + λ_giou·L_giou; a missing GIoU term contributes zero.
pub fn loss_total(
    g: &mut Graph,
    cls: TensorId,
    giou: Option<TensorId>,
    weights: &LossWeights,
) -> TensorId {
    let c = g.scale(cls, weights.lambda_cls);
    match giou {
        None => c,
        Some(gi) => {
            let gw = g.scale(gi, weights.lambda_giou);
            g.add(c, gw)
        }
    }
}

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub probes: usize,
}

/// Central-difference verification of every parameter gradient of a scalar
/// loss. `probes_per_param` entries of each parameter are perturbed (evenly
/// spaced through the array); the builder must be deterministic. Non-finite
/// analytic or numeric values drive the reported error to infinity.
pub fn check_gradients<F>(
    store: &ParamStore,
    eps: f64,
    probes_per_param: usize,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph, &mut Binder) -> TensorId,
{
    let eval = |s: &ParamStore, want_grads: bool| {
        let mut g = Graph::new(false);
        let mut b = Binder::new(s, true);
        let loss = build(&mut g, &mut b);
        let y = g.value(loss)[[0]];
        if want_grads {
            g.backward(loss);
            (y, Some(b.grads(&g)))
        } else {
            (y, None)
        }
    };
    let (_, grads) = eval(store, true);
    let grads = grads.unwrap();
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        probes: 0,
    };
    for name in &names {
        let n = probe.get(name).unwrap().len();
        let step = (n / probes_per_param).max(1);
        for k in (0..n).step_by(step) {
            let orig = probe.get(name).unwrap().as_slice().unwrap()[k];
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[k] = orig + eps;
            let (fp, _) = eval(&probe, false);
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[k] = orig - eps;
            let (fm, _) = eval(&probe, false);
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[k] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let ana = grads
                .get(name)
                .map_or(0.0, |ga| ga.as_slice().unwrap()[k]);
            let rel = if ana.is_finite() && num.is_finite() {
                (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6)
            } else {
                f64::INFINITY
            };
            report.probes += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{k}]");
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{encode_ltrb, Box2, PatchBox};
    use crate::nn::normal;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn cls_loss_zero_when_perfect() {
        let label = Array1::from_vec(vec![1.0, 0.5, 0.01, 0.0]);
        let pred = ndarray::arr2(&[[1.0], [0.5], [-0.3], [0.0]]);
        let mut g = Graph::new(false);
        let p = g.input(pred.into_dyn());
        let l = loss_cls(&mut g, p, &label, 0.05);
        assert_eq!(g.value(l)[[0]], 0.0);
    }

    #[test]
    fn cls_loss_known_contributions() {
        // fg cell 0.8 vs 1.0 contributes 0.04; bg cell -0.3 contributes 0
        let label = Array1::from_vec(vec![1.0, 0.0]);
        let pred = ndarray::arr2(&[[0.8], [-0.3]]);
        let mut g = Graph::new(false);
        let p = g.input(pred.into_dyn());
        let l = loss_cls(&mut g, p, &label, 0.05);
        assert!((g.value(l)[[0]] - 0.04 / 2.0).abs() < 1e-12);
        // positive background response is penalized
        let pred = ndarray::arr2(&[[1.0], [0.5]]);
        let mut g = Graph::new(false);
        let p = g.input(pred.into_dyn());
        let l = loss_cls(&mut g, p, &label, 0.05);
        assert!((g.value(l)[[0]] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn cls_value_twin_agrees_with_graph() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let label = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>());
        let pred = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let flat = Array1::from_iter(label.iter().copied());
        let mut g = Graph::new(false);
        let p = g.input(
            Array2::from_shape_fn((36, 1), |(i, _)| pred.as_slice().unwrap()[i]).into_dyn(),
        );
        let l = loss_cls(&mut g, p, &flat, 0.05);
        let plain = loss_cls_value(&pred, &label, 0.05);
        assert!((g.value(l)[[0]] - plain).abs() < 1e-12);
    }

    #[test]
    fn giou_loss_zero_iff_equal_boxes() {
        let bx: PatchBox = Box2::new(30.0, 40.0, 50.0, 60.0);
        let gt = encode_ltrb(&bx, 8, 8, 16);
        let fg = vec![10, 11, 18, 19];
        let mut g = Graph::new(false);
        let pred = g.input(gt.values.clone().into_dyn());
        let l = loss_giou(&mut g, pred, &gt, &fg, 8, 8).unwrap();
        assert!(g.value(l)[[0]].abs() < 1e-12);
        // perturb one side at one fg cell: loss departs from zero
        let mut vals = gt.values.clone();
        vals[(0, 1, 2)] += 0.05;
        let mut g = Graph::new(false);
        let pred = g.input(vals.into_dyn());
        let l = loss_giou(&mut g, pred, &gt, &fg, 8, 8).unwrap();
        assert!(g.value(l)[[0]] > 1e-6);
    }

    #[test]
    fn giou_loss_matches_area_arithmetic_oracle() {
        // boxes (0,0,2,2) vs (1,1,2,2) at one cell: IoU 1/7, GIoU 1/7 - 2/9
        let (h, w, s) = (18, 18, 16);
        let cell = 8 * 18 + 8;
        let gt_box: PatchBox = Box2::new(1.0, 1.0, 2.0, 2.0);
        let gt = encode_ltrb(&gt_box, h, w, s);
        let pred_box: PatchBox = Box2::new(0.0, 0.0, 2.0, 2.0);
        let pred_field = encode_ltrb(&pred_box, h, w, s);
        let mut g = Graph::new(false);
        let pred = g.input(pred_field.values.into_dyn());
        let l = loss_giou(&mut g, pred, &gt, &[cell], h, w).unwrap();
        let expect = 1.0 - (1.0 / 7.0 - 2.0 / 9.0);
        assert!((g.value(l)[[0]] - expect).abs() < 1e-9);
    }

    #[test]
    fn giou_loss_bounded_and_empty_fg_is_none() {
        let bx: PatchBox = Box2::new(20.0, 20.0, 40.0, 40.0);
        let gt = encode_ltrb(&bx, 6, 6, 16);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..25 {
            let noise =
                ndarray::Array3::from_shape_fn((4, 6, 6), |_| rng.gen::<f64>() * 0.4 + 0.01);
            let mut g = Graph::new(false);
            let pred = g.input(noise.into_dyn());
            let fg = vec![14, 15, 20, 21];
            let l = loss_giou(&mut g, pred, &gt, &fg, 6, 6).unwrap();
            let v = g.value(l)[[0]];
            assert!((0.0..=2.0).contains(&v), "giou loss out of range: {v}");
        }
        let mut g = Graph::new(false);
        let pred = g.input(ndarray::Array3::<f64>::zeros((4, 6, 6)).into_dyn());
        assert!(loss_giou(&mut g, pred, &gt, &[], 6, 6).is_none());
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        let mut g = Graph::new(false);
        let cls = g.input(ArrayD::from_elem(IxDyn(&[1]), 0.01));
        let gi = g.input(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let tot = loss_total(&mut g, cls, Some(gi), &w);
        assert!((g.value(tot)[[0]] - 1.5).abs() < 1e-12);
        let zero = g.input(ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let tot0 = loss_total(&mut g, zero, Some(zero), &w);
        assert_eq!(g.value(tot0)[[0]], 0.0);
        let only_cls = loss_total(&mut g, cls, None, &w);
        assert!((g.value(only_cls)[[0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_pure_quadratic_is_machine_exact() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        store.insert("p", normal(&mut rng, &[4, 3], 1.0));
        let report = check_gradients(&store, 1e-5, 12, |g, b| {
            let p = b.bind(g, "p");
            let sq = g.mul(p, p);
            g.sum_all(sq)
        });
        assert!(
            report.max_rel_err < 1e-9,
            "quadratic check {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn gradcheck_covers_both_losses_together() {
        // scores and ltrb produced from a shared parameter; labels chosen so
        // no probed point sits on the hinge or min/max kinks
        let (h, w) = (4, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        store.insert("w", normal(&mut rng, &[h * w, 5], 0.5));
        let label = Array1::from_shape_fn(h * w, |i| if i == 5 || i == 6 { 0.9 } else { 0.3 });
        let gt_box: PatchBox = Box2::new(10.0, 10.0, 40.0, 44.0);
        let gt = encode_ltrb(&gt_box, h, w, 16);
        let fgc = fg_cells(&label, 0.05);
        assert_eq!(fgc.len(), h * w); // every label above tau here
        let weights = LossWeights::default();
        let report = check_gradients(&store, 1e-6, 8, |g, b| {
            let p = b.bind(g, "w");
            let col = g.slice_cols(p, 0, 1);
            let cls = loss_cls(g, col, &label, 0.05);
            let rest = g.slice_cols(p, 1, 5);
            let e = g.exp(rest);
            let t = g.transpose2(e);
            let field = g.reshape(t, &[4, h, w]);
            let gi = loss_giou(g, field, &gt, &fgc, h, w).unwrap();
            loss_total(g, cls, Some(gi), &weights)
        });
        assert!(
            report.max_rel_err < 1e-4,
            "loss gradcheck {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}
