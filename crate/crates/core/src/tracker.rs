//! Online tracking loop: crop around the previous box, two-stage weight
//! prediction over a confidence-gated frame memory, box decoding, and
//! pseudo-label memory updates.

use crate::dcf::{dcf_optimize, DcfProblem, DEFAULT_ITERS, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::geometry::{decode_ltrb, extract_patch, make_crop, ImageBox, ScoreMap};
use crate::model::{EncodedFrame, Prediction, TrackModel};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

/// Which predictor produces the classifier weights during tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    /// Transformer decoder output, the trained path.
    Transformer,
    /// Filter optimized on the memory frames at track time.
    Dcf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// A frame enters memory only with confidence strictly above this.
    pub eta: f64,
    /// Below this score the target counts as lost and the box carries over.
    pub not_found_threshold: f64,
    pub search_factor: f64,
    /// Total memory slots including the initial frame.
    pub capacity: usize,
    pub predictor: PredictorKind,
    /// Predict box-regressor weights from the initial frame only.
    pub two_stage: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            eta: 0.90,
            not_found_threshold: 0.25,
            search_factor: 5.0,
            capacity: 2,
            predictor: PredictorKind::Transformer,
            two_stage: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.not_found_threshold > 0.0
            && self.not_found_threshold < self.eta
            && self.eta <= 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "thresholds must satisfy 0 < not_found ({}) < eta ({}) <= 1",
                self.not_found_threshold, self.eta
            )));
        }
        if self.capacity == 0 {
            return Err(Error::InvalidArgument("memory capacity must be >= 1".into()));
        }
        if !(self.search_factor > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "search factor must exceed 1, got {}",
                self.search_factor
            )));
        }
        Ok(())
    }
}

/// One stored frame: its encodings plus how and when it got in.
#[derive(Debug, Clone)]
pub struct MemoryFrame {
    pub encoded: EncodedFrame,
    pub confidence: f64,
    pub is_initial: bool,
}

/// Per-sequence tracking state. Mutated only through [`Tracker`] methods so
/// the memory invariants hold: the initial frame is never evicted and the
/// size never exceeds the configured capacity.
#[derive(Debug, Clone)]
pub struct TrackerState {
    current: ImageBox,
    memory: Vec<MemoryFrame>,
    found: bool,
    frame: usize,
}

impl TrackerState {
    pub fn current_box(&self) -> &ImageBox {
        &self.current
    }

    pub fn memory(&self) -> &[MemoryFrame] {
        &self.memory
    }

    pub fn found(&self) -> bool {
        self.found
    }

    pub fn frame_index(&self) -> usize {
        self.frame
    }
}

/// Adds a frame to memory if its confidence clears `eta`. The initial frame
/// stays put; recent slots fill up to capacity and then recycle oldest-first.
pub fn update_memory(
    state: &mut TrackerState,
    encoded: EncodedFrame,
    confidence: f64,
    cfg: &TrackerConfig,
) {
    if confidence <= cfg.eta {
        return;
    }
    let entry = MemoryFrame {
        encoded,
        confidence,
        is_initial: false,
    };
    if state.memory.len() < cfg.capacity {
        state.memory.push(entry);
        return;
    }
    if let Some(oldest) = state.memory.iter().position(|m| !m.is_initial) {
        state.memory.remove(oldest);
        state.memory.push(entry);
    }
}

/// Tracks one target through a sequence over shared read-only model weights.
pub struct Tracker<'m> {
    model: &'m TrackModel,
    cfg: TrackerConfig,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m TrackModel, cfg: TrackerConfig) -> Result<Tracker<'m>> {
        cfg.validate()?;
        Ok(Tracker { model, cfg })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Starts a track from an annotated first frame.
    pub fn init(&self, image: &Array3<f64>, target: &ImageBox) -> Result<TrackerState> {
        let (_, h, w) = image.dim();
        if !target.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "degenerate init box {target:?}"
            )));
        }
        if target.x < 0.0 || target.y < 0.0 || target.x2() > w as f64 || target.y2() > h as f64 {
            return Err(Error::InvalidArgument(format!(
                "init box {target:?} outside {w}x{h} frame"
            )));
        }
        let crop = make_crop(target, self.cfg.search_factor, self.model.cfg.patch_px)?;
        let (patch, _) = extract_patch(image, &crop);
        let encoded = self
            .model
            .encode_training_frame(&patch, &crop.to_patch(target))?;
        Ok(TrackerState {
            current: *target,
            memory: vec![MemoryFrame {
                encoded,
                confidence: 1.0,
                is_initial: true,
            }],
            found: true,
            frame: 0,
        })
    }

    /// Predicts weights for a test patch from the current memory.
    ///
    /// With two-stage prediction on and recent frames in memory, classifier
    /// weights come from a pass over the full memory and box-regressor
    /// weights from a second pass where recent frames are masked out of
    /// attention. Each head is applied to the test tokens of its own pass.
    pub fn predict(&self, state: &TrackerState, patch: &Array3<f64>) -> Result<Prediction> {
        let tokens: Vec<Array2<f64>> = state
            .memory
            .iter()
            .map(|m| m.encoded.tokens.clone())
            .collect();
        let stage1 = self.model.predict(&tokens, patch, &[])?;
        let recent: Vec<usize> = state
            .memory
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_initial)
            .map(|(i, _)| i)
            .collect();
        let mut pred = if self.cfg.two_stage && !recent.is_empty() {
            let stage2 = self.model.predict(&tokens, patch, &recent)?;
            Prediction {
                w_cls: stage1.w_cls,
                scores: stage1.scores,
                test_features: stage1.test_features,
                w_bbreg: stage2.w_bbreg,
                field: stage2.field,
            }
        } else {
            stage1
        };
        if self.cfg.predictor == PredictorKind::Dcf {
            let problem = DcfProblem::new(
                state.memory.iter().map(|m| m.encoded.features.clone()).collect(),
                state.memory.iter().map(|m| m.encoded.label.clone()).collect(),
                DEFAULT_LAMBDA,
                self.model.cfg.loss.tau,
            )?;
            let init = Array1::zeros(self.model.cfg.width);
            let (w, _) = dcf_optimize(&problem, DEFAULT_ITERS, &init)?;
            let g = self.model.cfg.grid();
            let flat = pred.test_features.dot(&w);
            let values = flat.into_shape_with_order((g, g)).unwrap();
            pred.scores = ScoreMap::new(values, self.model.cfg.stride);
            pred.w_cls = w;
        }
        Ok(pred)
    }

    /// Processes the next frame: locate the target, move the box if the
    /// score clears the lost threshold, and store the frame with its own
    /// predicted box as label if the score also clears `eta`.
    pub fn track(
        &self,
        state: &mut TrackerState,
        image: &Array3<f64>,
    ) -> Result<(ImageBox, f64)> {
        let crop = make_crop(&state.current, self.cfg.search_factor, self.model.cfg.patch_px)?;
        let (patch, _) = extract_patch(image, &crop);
        let pred = self.predict(state, &patch)?;
        let confidence = pred.scores.max_value();
        let g = self.model.cfg.grid();

        let mut found = confidence >= self.cfg.not_found_threshold;
        let mut predicted = None;
        if found {
            match decode_ltrb(&pred.field, pred.scores.argmax_cell(), g, g) {
                Ok(pb) => {
                    state.current = crop.to_image(&pb);
                    predicted = Some(pb);
                }
                Err(_) => found = false,
            }
        }
        state.found = found;
        if let Some(pb) = predicted {
            if confidence > self.cfg.eta {
                let encoded = self.model.encode_training_frame(&patch, &pb)?;
                update_memory(state, encoded, confidence, &self.cfg);
            }
        }
        state.frame += 1;
        Ok((state.current, confidence))
    }
}

/// Per-frame tracking output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedFrame {
    pub bbox: ImageBox,
    pub confidence: f64,
    pub found: bool,
}

/// Runs one pass over a full sequence: first frame initializes, the rest are
/// tracked. The iterator yields frames so sequences never need to fit in
/// memory at once.
pub fn run_tracker<I>(
    model: &TrackModel,
    cfg: TrackerConfig,
    init_box: &ImageBox,
    frames: I,
) -> Result<Vec<TrackedFrame>>
where
    I: IntoIterator<Item = Result<Array3<f64>>>,
{
    let tracker = Tracker::new(model, cfg)?;
    let mut iter = frames.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty sequence".into()))??;
    let mut state = tracker.init(&first, init_box)?;
    let mut out = vec![TrackedFrame {
        bbox: *init_box,
        confidence: 1.0,
        found: true,
    }];
    for frame in iter {
        let (bbox, confidence) = tracker.track(&mut state, &frame?)?;
        out.push(TrackedFrame {
            bbox,
            confidence,
            found: state.found,
        });
    }
    Ok(out)
}
