//! Triplet sampling, crop augmentation, and the training loop.
//!
//! Training draws sub-sequences from a pool of generated sequences: two
//! annotated frames plus one test frame from a bounded frame window. One RNG
//! drives sampling, augmentation, and dropout, and its position is stored in
//! every checkpoint, so an interrupted run resumed from disk continues
//! bit-identically.

use crate::checkpoint::{load_checkpoint_expecting, save_checkpoint, TrainState};
use crate::error::{Error, Result};
use crate::geometry::{extract_patch, make_crop, Box2, ImageBox, PatchBox};
use crate::graph::Graph;
use crate::model::{ModelConfig, TrackModel, TrainFrame, TrainItem};
use crate::nn::{AdamW, Binder, OptState};
use crate::synth::{SequenceSpec, SyntheticSequence};
use ndarray::{s, Array3};
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    /// Triplets averaged into one optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Single learning-rate decay: multiply by `decay_factor` from
    /// `decay_at_frac * steps` onward.
    pub decay_factor: f64,
    pub decay_at_frac: f64,
    /// Maximum index spread of a sampled triplet.
    pub window: usize,
    pub augment: bool,
    /// Number of generated sequences in the training pool.
    pub num_sequences: usize,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub sequence: SequenceSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            batch: 4,
            lr: 1e-4,
            weight_decay: 1e-4,
            decay_factor: 0.2,
            decay_at_frac: 0.6,
            window: 200,
            augment: true,
            num_sequences: 64,
            checkpoint_every: 0,
            sequence: SequenceSpec::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch == 0 || self.num_sequences == 0 {
            return Err(Error::config("steps, batch, and num_sequences must be positive"));
        }
        if self.window < 3 {
            return Err(Error::config("window must span at least 3 frames"));
        }
        if self.sequence.length < 3 {
            return Err(Error::config("training sequences need at least 3 frames"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("negative learning rate or weight decay"));
        }
        if !(0.0..=1.0).contains(&self.decay_at_frac) || self.decay_factor <= 0.0 {
            return Err(Error::config("bad decay schedule"));
        }
        Ok(())
    }
}

/// Train/test frame indices inside one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndices {
    pub train: [usize; 2],
    pub test: usize,
}

/// Three distinct frames within a `window`-sized span of a sequence.
pub fn sample_indices(
    len: usize,
    window: usize,
    rng: &mut ChaCha12Rng,
) -> Result<TripletIndices> {
    if len < 3 {
        return Err(Error::InvalidArgument(format!(
            "sequence of {len} frames cannot yield a triplet"
        )));
    }
    let span = window.min(len);
    if span < 3 {
        return Err(Error::InvalidArgument("window narrower than 3 frames".into()));
    }
    let start = rng.gen_range(0..=len - span);
    let picks = index_sample(rng, span, 3);
    let mut idx = [
        start + picks.index(0),
        start + picks.index(1),
        start + picks.index(2),
    ];
    let test_slot = rng.gen_range(0..3);
    idx.swap(test_slot, 2);
    idx[..2].sort_unstable();
    Ok(TripletIndices {
        train: [idx[0], idx[1]],
        test: idx[2],
    })
}

/// Per-triplet augmentation draws; `None` means centered crops, no jitter.
#[derive(Debug, Clone)]
struct TripletAugment {
    flip: bool,
    gains: [f64; 3],
    bias: f64,
}

impl TripletAugment {
    fn sample(rng: &mut ChaCha12Rng) -> Self {
        TripletAugment {
            flip: rng.gen::<f64>() < 0.5,
            gains: [
                0.85 + 0.3 * rng.gen::<f64>(),
                0.85 + 0.3 * rng.gen::<f64>(),
                0.85 + 0.3 * rng.gen::<f64>(),
            ],
            bias: 0.16 * rng.gen::<f64>() - 0.08,
        }
    }
}

const JITTER_CENTER_FRAC: f64 = 0.08;
const JITTER_LOG_SCALE: f64 = 0.18;

/// Per-frame crop perturbation: center shift as a fraction of the crop side,
/// and a size multiplier.
#[derive(Debug, Clone, Copy)]
struct FrameJitter {
    dx: f64,
    dy: f64,
    scale: f64,
}

impl FrameJitter {
    fn none() -> Self {
        FrameJitter {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
        }
    }

    fn sample(rng: &mut ChaCha12Rng) -> Self {
        FrameJitter {
            dx: (2.0 * rng.gen::<f64>() - 1.0) * JITTER_CENTER_FRAC,
            dy: (2.0 * rng.gen::<f64>() - 1.0) * JITTER_CENTER_FRAC,
            scale: ((2.0 * rng.gen::<f64>() - 1.0) * JITTER_LOG_SCALE).exp(),
        }
    }
}

/// Extracts the training crop for one frame. With jitter the crop center and
/// scale move off the truth; with `aug` the patch gets color-shifted and may
/// be mirrored. Both at defaults give a crop exactly centered on the box.
fn crop_frame(
    image: &Array3<f64>,
    gt: &ImageBox,
    model: &ModelConfig,
    jitter: FrameJitter,
    aug: Option<&TripletAugment>,
) -> Result<(Array3<f64>, PatchBox)> {
    let (cx, cy) = gt.center();
    let side = model.search_factor * gt.base_size();
    let pseudo = Box2::from_center(
        cx + jitter.dx * side,
        cy + jitter.dy * side,
        gt.w * jitter.scale,
        gt.h * jitter.scale,
    );
    let crop = make_crop(&pseudo, model.search_factor, model.patch_px)?;
    let (mut patch, _) = extract_patch(image, &crop);
    let mut b = crop.to_patch(gt);
    if let Some(ta) = aug {
        for (c, &g) in ta.gains.iter().enumerate() {
            patch
                .slice_mut(s![c, .., ..])
                .mapv_inplace(|v| (v * g + ta.bias).clamp(0.0, 1.0));
        }
        if ta.flip {
            patch = patch.slice(s![.., .., ..;-1]).to_owned();
            let px = model.patch_px as f64;
            b = Box2::new(px - b.x - b.w, b.y, b.w, b.h);
        }
    }
    Ok((patch, b))
}

/// Samples one training triplet from a sequence.
pub fn sample_triplet(
    seq: &SyntheticSequence,
    model: &ModelConfig,
    window: usize,
    augment: bool,
    rng: &mut ChaCha12Rng,
) -> Result<TrainItem> {
    let idx = sample_indices(seq.len(), window, rng)?;
    let aug = augment.then(|| TripletAugment::sample(rng));
    let get = |t: usize, rng: &mut ChaCha12Rng| -> Result<TrainFrame> {
        let image = seq.render(t);
        let jitter = if augment {
            FrameJitter::sample(rng)
        } else {
            FrameJitter::none()
        };
        let (patch, target) = crop_frame(&image, seq.gt(t), model, jitter, aug.as_ref())?;
        Ok(TrainFrame { patch, target })
    };
    Ok(TrainItem {
        train: vec![get(idx.train[0], rng)?, get(idx.train[1], rng)?],
        test: get(idx.test, rng)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub cls: f64,
    pub giou: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss_cls,loss_giou,loss_total")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.step, r.cls, r.giou, r.total)?;
    }
    f.flush()?;
    Ok(())
}

/// Mean of the first and last `k` rows of a total-loss trace.
pub fn smoothed_endpoints(rows: &[TraceRow], k: usize) -> (f64, f64) {
    let k = k.clamp(1, rows.len());
    let head: f64 = rows[..k].iter().map(|r| r.total).sum::<f64>() / k as f64;
    let tail: f64 = rows[rows.len() - k..].iter().map(|r| r.total).sum::<f64>() / k as f64;
    (head, tail)
}

pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub checkpoint: PathBuf,
}

/// Spec of the i-th sequence in the training pool. Seeds mix the data seed,
/// the run seed, and the index, so pools from different runs stay disjoint.
pub fn pool_spec(cfg: &TrainConfig, i: usize) -> SequenceSpec {
    SequenceSpec {
        seed: cfg
            .sequence
            .seed
            .wrapping_add(cfg.seed.wrapping_mul(0x9E37_79B9))
            .wrapping_add(i as u64),
        ..cfg.sequence.clone()
    }
}

/// Runs (or resumes) training, writing checkpoints and a loss trace under
/// `out_dir`. The returned trace covers only the steps executed by this call.
pub fn train(
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    resume_from: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;

    let pool: Vec<SyntheticSequence> = (0..cfg.num_sequences)
        .map(|i| SyntheticSequence::generate(&pool_spec(cfg, i)))
        .collect::<Result<Vec<_>>>()?;

    let (model, mut opt_state, mut rng, start_step) = match resume_from {
        None => {
            let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            let model = TrackModel::init(cfg.model.clone(), &mut init_rng)?;
            // separate stream for the training loop so adding parameters
            // never shifts the data sequence
            let rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            (model, OptState::default(), rng, 0u64)
        }
        Some(path) => {
            let (model, snap) = load_checkpoint_expecting(path, &cfg.model)?;
            let snap = snap.ok_or_else(|| {
                Error::checkpoint("checkpoint lacks training state; cannot resume")
            })?;
            (model, snap.opt, snap.rng, snap.step)
        }
    };
    let mut model = model;
    let optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    let decay_at = (cfg.steps as f64 * cfg.decay_at_frac).floor() as u64;

    let mut trace = Vec::with_capacity((cfg.steps - start_step) as usize);
    for step in start_step..cfg.steps {
        let mut grad_sum: std::collections::BTreeMap<String, ndarray::ArrayD<f64>> =
            std::collections::BTreeMap::new();
        let (mut cls_acc, mut giou_acc, mut tot_acc) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch {
            let seq = &pool[rng.gen_range(0..pool.len())];
            let item = sample_triplet(seq, &cfg.model, cfg.window, cfg.augment, &mut rng)?;
            let mut g = Graph::new(true);
            let mut b = Binder::new(&model.store, true);
            let out = model.train_forward(&mut g, &mut b, &item, &mut rng)?;
            let total = g.value(out.total)[[0]];
            if !total.is_finite() {
                return Err(Error::Diverged { step, value: total });
            }
            cls_acc += g.value(out.cls)[[0]];
            giou_acc += out.giou.map_or(0.0, |id| g.value(id)[[0]]);
            tot_acc += total;
            g.backward(out.total);
            for (name, grad) in b.grads(&g) {
                grad_sum
                    .entry(name)
                    .and_modify(|a| *a += &grad)
                    .or_insert(grad);
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        for grad in grad_sum.values_mut() {
            grad.mapv_inplace(|v| v * inv);
        }
        let lr_scale = if step >= decay_at { cfg.decay_factor } else { 1.0 };
        optimizer.step(&mut opt_state, &mut model.store, &grad_sum, lr_scale);
        trace.push(TraceRow {
            step,
            cls: cls_acc * inv,
            giou: giou_acc * inv,
            total: tot_acc * inv,
        });

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            save_checkpoint(
                out_dir.join(format!("checkpoint-{done:06}.ckpt")),
                &model,
                Some(TrainState {
                    opt: &opt_state,
                    rng: &rng,
                    step: done,
                }),
            )?;
        }
    }

    let checkpoint = out_dir.join("model.ckpt");
    save_checkpoint(
        &checkpoint,
        &model,
        Some(TrainState {
            opt: &opt_state,
            rng: &rng,
            step: cfg.steps,
        }),
    )?;
    write_loss_csv(out_dir.join("loss.csv"), &trace)?;
    Ok(TrainReport { trace, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_test_config;

    fn tiny_train_config(seed: u64, steps: u64) -> TrainConfig {
        TrainConfig {
            seed,
            steps,
            batch: 2,
            num_sequences: 3,
            window: 10,
            sequence: SequenceSpec {
                length: 12,
                distractors: 1,
                ..SequenceSpec::default()
            },
            model: tiny_test_config(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn indices_stay_in_window_and_test_is_distinct() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..500 {
            let t = sample_indices(1000, 200, &mut rng).unwrap();
            let lo = t.train[0].min(t.test);
            let hi = t.train[1].max(t.test);
            assert!(hi - lo <= 199, "{t:?}");
            assert!(t.train[0] < t.train[1]);
            assert!(t.test != t.train[0] && t.test != t.train[1]);
            assert!(hi < 1000);
        }
        assert!(sample_indices(2, 200, &mut rng).is_err());
        assert!(sample_indices(100, 2, &mut rng).is_err());
    }

    #[test]
    fn unaugmented_crop_is_centered_on_truth() {
        let spec = SequenceSpec {
            seed: 11,
            length: 3,
            ..SequenceSpec::default()
        };
        let seq = SyntheticSequence::generate(&spec).unwrap();
        let model = tiny_test_config();
        let img = seq.render(0);
        let (patch, b) = crop_frame(&img, seq.gt(0), &model, FrameJitter::none(), None).unwrap();
        assert_eq!(patch.dim(), (3, 32, 32));
        let (cx, cy) = b.center();
        assert!((cx - 16.0).abs() < 1e-9, "center x {cx}");
        assert!((cy - 16.0).abs() < 1e-9, "center y {cy}");
        // base size maps to patch_px / search_factor
        let expected = model.patch_px as f64 / model.search_factor;
        assert!((b.base_size() - expected).abs() < 1e-9);
    }

    #[test]
    fn flip_mirrors_patch_and_box_consistently() {
        let spec = SequenceSpec {
            seed: 12,
            length: 3,
            ..SequenceSpec::default()
        };
        let seq = SyntheticSequence::generate(&spec).unwrap();
        let model = tiny_test_config();
        let img = seq.render(1);
        let (plain, pb) =
            crop_frame(&img, seq.gt(1), &model, FrameJitter::none(), None).unwrap();

        let aug = TripletAugment {
            flip: true,
            gains: [1.0; 3],
            bias: 0.0,
        };
        let (flipped, fb) =
            crop_frame(&img, seq.gt(1), &model, FrameJitter::none(), Some(&aug)).unwrap();
        assert_eq!(flipped, plain.slice(s![.., .., ..;-1]).to_owned());
        let px = model.patch_px as f64;
        assert!((fb.x - (px - pb.x - pb.w)).abs() < 1e-12);
        assert_eq!((fb.y, fb.w, fb.h), (pb.y, pb.w, pb.h));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config(5, 2);
        cfg.lr = 0.0;
        let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let before = TrackModel::init(cfg.model.clone(), &mut init_rng).unwrap();
        let report = train(&cfg, dir.path(), None).unwrap();
        assert_eq!(report.trace.len(), 2);
        assert!(report.trace.iter().all(|r| r.total.is_finite()));
        let (after, _) = crate::checkpoint::load_checkpoint(&report.checkpoint).unwrap();
        for ((n1, a), (_, b)) in after.store.iter().zip(before.store.iter()) {
            assert_eq!(a, b, "parameter `{n1}` moved with lr 0");
        }
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config(7, 3);
        let r1 = train(&cfg, d1.path(), None).unwrap();
        let r2 = train(&cfg, d2.path(), None).unwrap();
        assert_eq!(r1.trace, r2.trace);
        let b1 = std::fs::read(&r1.checkpoint).unwrap();
        let b2 = std::fs::read(&r2.checkpoint).unwrap();
        assert_eq!(b1, b2, "checkpoints differ between identical runs");
    }

    #[test]
    fn resume_continues_bit_identically() {
        let d_full = tempfile::tempdir().unwrap();
        let d_res = tempfile::tempdir().unwrap();

        // the lr schedule depends on the total step count, so the interrupted
        // run must use the same config and stop via a periodic checkpoint
        let mut cfg = tiny_train_config(9, 4);
        cfg.checkpoint_every = 2;
        let full = train(&cfg, d_full.path(), None).unwrap();
        let midpoint = d_full.path().join("checkpoint-000002.ckpt");
        assert!(midpoint.is_file(), "periodic checkpoint missing");

        let resumed = train(&cfg, d_res.path(), Some(&midpoint)).unwrap();
        assert_eq!(resumed.trace.len(), 2);
        assert_eq!(resumed.trace[..], full.trace[2..]);
        let a = std::fs::read(&full.checkpoint).unwrap();
        let b = std::fs::read(&resumed.checkpoint).unwrap();
        assert_eq!(a, b, "resumed checkpoint differs from straight-through run");
    }

    #[test]
    fn losses_decrease_under_training_pressure() {
        // not the calibrated end-to-end criterion, just a smoke signal that
        // gradients point somewhere useful on a tiny model
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config(3, 12);
        cfg.lr = 3e-3;
        cfg.augment = false;
        let report = train(&cfg, dir.path(), None).unwrap();
        let (head, tail) = smoothed_endpoints(&report.trace, 3);
        assert!(tail < head, "loss did not move: {head} -> {tail}");
    }
}
