//! The assembled tracking model: feature extractor, frame encodings, the
//! transformer weight predictor, and both target-model heads behind one
//! configuration struct.
//!
//! Two forward paths exist. The training path consumes a sampled frame
//! triplet and produces loss tensors on a live graph. The inference path runs
//! in evaluation mode over stored memory-frame tokens and returns plain
//! arrays for the tracker loop.

use crate::encoding::{
    assemble_test_tokens, assemble_train_tokens, label_to_flat, ltrb_to_cells,
    positional_encoding, ExtentMlp, TinyBackbone, Tokens,
};
use crate::error::{Error, Result};
use crate::geometry::{encode_ltrb, gaussian_label, DenseLtrb, PatchBox, ScoreMap};
use crate::graph::{Graph, TensorId};
use crate::heads::{ltrb_to_field, patch_to_input, regress_boxes, scores_to_map, target_scores, BoxHead};
use crate::nn::{normal, Binder, ParamStore};
use crate::objectives::{fg_cells, loss_cls, loss_giou, loss_total, LossWeights};
use crate::predictor::{build_sequence, PredictedWeights, Transformer, TransformerConfig, WeightSplit};
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Feature-map stride fixed by the backbone's four stride-2 blocks.
pub const FEATURE_STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token width C shared by encodings, transformer, and heads.
    pub width: usize,
    pub backbone_channels: usize,
    /// Side length of the square input patch in pixels.
    pub patch_px: usize,
    pub stride: usize,
    pub box_head_width: usize,
    pub extent_hidden1: usize,
    pub extent_hidden2: usize,
    /// Label spread as a fraction of the target's base size.
    pub sigma_ratio: f64,
    /// Search-region side relative to the target's base size.
    pub search_factor: f64,
    /// Adds a background embedding to the location encoding.
    pub use_bg_embedding: bool,
    /// Feeds the per-cell box-extent encoding into training-frame tokens.
    pub use_extent_encoding: bool,
    pub transformer: TransformerConfig,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 256,
            backbone_channels: 64,
            patch_px: 288,
            stride: FEATURE_STRIDE,
            box_head_width: 256,
            extent_hidden1: 64,
            extent_hidden2: 256,
            sigma_ratio: 0.25,
            search_factor: 5.0,
            use_bg_embedding: false,
            use_extent_encoding: true,
            transformer: TransformerConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    /// Score-map side length.
    pub fn grid(&self) -> usize {
        self.patch_px / self.stride
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stride != FEATURE_STRIDE {
            return fail(format!(
                "stride {} unsupported; the backbone downsamples by {FEATURE_STRIDE}",
                self.stride
            ));
        }
        if self.patch_px == 0 || self.patch_px % self.stride != 0 {
            return fail(format!(
                "patch {}px not divisible by stride {}",
                self.patch_px, self.stride
            ));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return fail(format!(
                "width {} must be a positive multiple of 4 for the positional table",
                self.width
            ));
        }
        if self.transformer.heads == 0 || self.width % self.transformer.heads != 0 {
            return fail(format!(
                "width {} not divisible by {} heads",
                self.width, self.transformer.heads
            ));
        }
        if self.backbone_channels == 0
            || self.box_head_width == 0
            || self.extent_hidden1 == 0
            || self.extent_hidden2 == 0
            || self.transformer.ffn_width == 0
            || self.transformer.enc_layers == 0
            || self.transformer.dec_layers == 0
        {
            return fail("zero-sized layer in config".into());
        }
        if !(0.0..1.0).contains(&self.transformer.dropout) {
            return fail(format!("dropout {} outside [0,1)", self.transformer.dropout));
        }
        if self.sigma_ratio <= 0.0 {
            return fail("sigma_ratio must be positive".into());
        }
        if self.search_factor <= 1.0 {
            return fail("search_factor must exceed 1".into());
        }
        if self.loss.lambda_cls < 0.0 || self.loss.lambda_giou < 0.0 {
            return fail("negative loss weight".into());
        }
        if !(0.0..1.0).contains(&self.loss.tau) {
            return fail(format!("tau {} outside (0,1)", self.loss.tau));
        }
        Ok(())
    }
}

/// One frame of a training triplet: an extracted patch and the target box in
/// that patch's pixel frame.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub patch: Array3<f64>,
    pub target: PatchBox,
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub train: Vec<TrainFrame>,
    pub test: TrainFrame,
}

/// Loss tensors plus the prediction tensors they were computed from.
pub struct TrainOutputs {
    pub cls: TensorId,
    pub giou: Option<TensorId>,
    pub total: TensorId,
    pub scores: TensorId,
    pub field: TensorId,
}

/// Inference result for one test patch, in patch coordinates.
pub struct Prediction {
    pub w_cls: Array1<f64>,
    pub w_bbreg: Array1<f64>,
    pub scores: ScoreMap,
    pub field: DenseLtrb,
    /// Backbone tokens of the test patch before the test-marker add,
    /// (H·W, width). Feature space for the optimization-based classifier.
    pub test_features: Array2<f64>,
}

/// Memory-frame encodings produced once when a frame is stored.
#[derive(Debug, Clone)]
pub struct EncodedFrame {
    /// Assembled training-frame tokens (features + location + extent).
    pub tokens: Array2<f64>,
    /// Raw backbone tokens, for the optimization-based classifier.
    pub features: Array2<f64>,
    pub label: Array1<f64>,
}

#[derive(Debug)]
pub struct TrackModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: TinyBackbone,
    extent: ExtentMlp,
    transformer: Transformer,
    split: Option<WeightSplit>,
    box_head: BoxHead,
    pos_frame: Array2<f64>,
}

impl TrackModel {
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha12Rng) -> Result<TrackModel> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let c = cfg.width;
        let backbone = TinyBackbone::init(&mut store, rng, "backbone", cfg.backbone_channels, c);
        let extent = ExtentMlp::init(
            &mut store,
            rng,
            "extent",
            cfg.extent_hidden1,
            cfg.extent_hidden2,
            c,
        );
        store.insert("embed.fg", normal(rng, &[c], 1.0));
        if cfg.use_bg_embedding {
            store.insert("embed.bg", normal(rng, &[c], 1.0));
        }
        store.insert("embed.test", normal(rng, &[c], 1.0));
        let t = &cfg.transformer;
        if t.two_queries {
            store.insert("query.cls", normal(rng, &[c], 1.0));
            store.insert("query.bbreg", normal(rng, &[c], 1.0));
        } else if !t.shared_query {
            store.insert("query.dec", normal(rng, &[c], 1.0));
        }
        let transformer = Transformer::init(&mut store, rng, "tr", c, t.clone());
        let split = if t.two_queries {
            None
        } else {
            Some(WeightSplit::init(&mut store, rng, "split", c))
        };
        let box_head = BoxHead::init(&mut store, rng, "boxhead", c, cfg.box_head_width);
        let g = cfg.grid();
        let pos_frame = positional_encoding(g, g, c);
        Ok(TrackModel {
            cfg,
            store,
            backbone,
            extent,
            transformer,
            split,
            box_head,
            pos_frame,
        })
    }

    /// Positional table tiled over `frames` frames, as a graph constant.
    fn pos_input(&self, g: &mut Graph, frames: usize) -> TensorId {
        let per = self.pos_frame.nrows();
        let c = self.pos_frame.ncols();
        let mut tiled = Array2::<f64>::zeros((frames * per, c));
        for f in 0..frames {
            tiled
                .slice_mut(ndarray::s![f * per..(f + 1) * per, ..])
                .assign(&self.pos_frame);
        }
        g.input(tiled.into_dyn())
    }

    fn check_patch(&self, patch: &Array3<f64>) -> Result<()> {
        let (ch, h, w) = patch.dim();
        let p = self.cfg.patch_px;
        if ch != 3 || h != p || w != p {
            return Err(Error::ShapeMismatch {
                name: "input patch".into(),
                expected: vec![3, p, p],
                got: vec![ch, h, w],
            });
        }
        Ok(())
    }

    fn frame_encodings(&self, frame: &TrainFrame) -> Result<(Array1<f64>, DenseLtrb)> {
        let gsz = self.cfg.grid();
        let label = gaussian_label(
            &frame.target,
            gsz,
            gsz,
            self.cfg.stride,
            self.cfg.sigma_ratio,
        )?;
        let ltrb = encode_ltrb(&frame.target, gsz, gsz, self.cfg.stride);
        Ok((label_to_flat(&label), ltrb))
    }

    /// Builds one training frame's tokens on the graph.
    fn train_tokens(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        frame: &TrainFrame,
    ) -> Result<(Tokens, Tokens)> {
        self.check_patch(&frame.patch)?;
        let (label_flat, ltrb) = self.frame_encodings(frame)?;
        let patch = g.input(patch_to_input(&frame.patch));
        let x = self.backbone.forward(g, b, patch);
        let y = g.input(label_flat.into_dyn());
        let d = if self.cfg.use_extent_encoding {
            Some(g.input(ltrb_to_cells(&ltrb).into_dyn()))
        } else {
            None
        };
        let e_fg = b.bind(g, "embed.fg");
        let e_bg = self
            .cfg
            .use_bg_embedding
            .then(|| b.bind(g, "embed.bg"));
        let v = assemble_train_tokens(g, b, x, y, d, &self.extent, e_fg, e_bg);
        Ok((v, x))
    }

    fn test_tokens(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        patch: &Array3<f64>,
    ) -> Result<(Tokens, Tokens)> {
        self.check_patch(patch)?;
        let p = g.input(patch_to_input(patch));
        let x = self.backbone.forward(g, b, p);
        let e_test = b.bind(g, "embed.test");
        Ok((assemble_test_tokens(g, x, e_test), x))
    }

    /// Decoder queries as a (n_queries, C) tensor. The foreground embedding
    /// doubles as the query unless the config swaps in dedicated ones.
    fn queries(&self, g: &mut Graph, b: &mut Binder) -> TensorId {
        let c = self.cfg.width;
        let t = &self.cfg.transformer;
        if t.two_queries {
            let qc = b.bind(g, "query.cls");
            let qb = b.bind(g, "query.bbreg");
            let qc = g.reshape(qc, &[1, c]);
            let qb = g.reshape(qb, &[1, c]);
            g.concat_rows(&[qc, qb])
        } else if t.shared_query {
            let e = b.bind(g, "embed.fg");
            g.reshape(e, &[1, c])
        } else {
            let q = b.bind(g, "query.dec");
            g.reshape(q, &[1, c])
        }
    }

    /// Runs the predictor over an assembled sequence and returns both weight
    /// rows, each (1, C).
    fn predict_weights(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        seq: &crate::predictor::TokenSequence,
        rng: &mut ChaCha12Rng,
    ) -> (PredictedWeights, Tokens) {
        let frames = seq.len() / (seq.h * seq.w);
        let pos = self.pos_input(g, frames);
        let z = self.transformer.encode_joint(g, b, seq, pos, rng);
        let queries = self.queries(g, b);
        let out = self.transformer.decode_model(g, b, &z, queries, pos, rng);
        let weights = match &self.split {
            Some(split) => split.split(g, b, out),
            None => PredictedWeights {
                cls: g.slice_rows(out, 0, 1),
                bbreg: g.slice_rows(out, 1, 2),
            },
        };
        let span = z.test_span();
        let z_test = Tokens {
            id: g.slice_rows(z.id, span.start, span.end),
            h: z.h,
            w: z.w,
        };
        (weights, z_test)
    }

    /// Training forward pass over one triplet. The test frame's ground truth
    /// feeds only the loss terms, never any encoding input.
    pub fn train_forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        item: &TrainItem,
        rng: &mut ChaCha12Rng,
    ) -> Result<TrainOutputs> {
        if item.train.is_empty() {
            return Err(Error::InvalidArgument("triplet without training frames".into()));
        }
        let mut v_train = Vec::with_capacity(item.train.len());
        for frame in &item.train {
            let (v, _) = self.train_tokens(g, b, frame)?;
            v_train.push(v);
        }
        let (v_test, _) = self.test_tokens(g, b, &item.test.patch)?;
        let seq = build_sequence(g, &v_train, v_test, &[])?;
        let (weights, z_test) = self.predict_weights(g, b, &seq, rng);

        let scores = target_scores(g, weights.cls, &z_test);
        let field = regress_boxes(g, b, weights.bbreg, &z_test, &self.box_head);

        let (test_label, test_ltrb) = self.frame_encodings(&item.test)?;
        let tau = self.cfg.loss.tau;
        let cls = loss_cls(g, scores, &test_label, tau);
        let fg = fg_cells(&test_label, tau);
        let gsz = self.cfg.grid();
        let giou = loss_giou(g, field, &test_ltrb, &fg, gsz, gsz);
        let total = loss_total(g, cls, giou, &self.cfg.loss);
        Ok(TrainOutputs {
            cls,
            giou,
            total,
            scores,
            field,
        })
    }

    /// Encodes a frame for the tracker memory (evaluation mode).
    pub fn encode_training_frame(
        &self,
        patch: &Array3<f64>,
        target: &PatchBox,
    ) -> Result<EncodedFrame> {
        let mut g = Graph::new(false);
        let mut b = Binder::new(&self.store, false);
        let frame = TrainFrame {
            patch: patch.clone(),
            target: *target,
        };
        let (v, x) = self.train_tokens(&mut g, &mut b, &frame)?;
        let (label, _) = self.frame_encodings(&frame)?;
        let dim = (v.h * v.w, self.cfg.width);
        let tokens = g.value(v.id).clone().into_shape_with_order(dim).unwrap();
        let features = g.value(x.id).clone().into_shape_with_order(dim).unwrap();
        Ok(EncodedFrame {
            tokens,
            features,
            label,
        })
    }

    /// Inference pass: predict weights over stored memory tokens plus the
    /// current test patch, with `masked` memory frames excluded from
    /// attention, then apply both heads.
    pub fn predict(
        &self,
        memory: &[Array2<f64>],
        test_patch: &Array3<f64>,
        masked: &[usize],
    ) -> Result<Prediction> {
        if memory.is_empty() {
            return Err(Error::InvalidArgument("empty memory".into()));
        }
        let gsz = self.cfg.grid();
        let per = gsz * gsz;
        let mut g = Graph::new(false);
        let mut b = Binder::new(&self.store, false);
        let mut rng = ChaCha12Rng::seed_from_u64(0);

        let mut v_train = Vec::with_capacity(memory.len());
        for m in memory {
            if m.dim() != (per, self.cfg.width) {
                return Err(Error::ShapeMismatch {
                    name: "memory tokens".into(),
                    expected: vec![per, self.cfg.width],
                    got: m.shape().to_vec(),
                });
            }
            let id = g.input(m.clone().into_dyn());
            v_train.push(Tokens { id, h: gsz, w: gsz });
        }
        let (v_test, x_test) = self.test_tokens(&mut g, &mut b, test_patch)?;
        let seq = build_sequence(&mut g, &v_train, v_test, masked)?;
        let (weights, z_test) = self.predict_weights(&mut g, &mut b, &seq, &mut rng);

        let scores_id = target_scores(&mut g, weights.cls, &z_test);
        let field_id = regress_boxes(&mut g, &mut b, weights.bbreg, &z_test, &self.box_head);

        let scores = scores_to_map(&g, scores_id, gsz, gsz, self.cfg.stride);
        let field = ltrb_to_field(&g, field_id, self.cfg.stride);
        let row = |id: TensorId| -> Array1<f64> {
            let v = g.value(id);
            Array1::from_iter(v.iter().copied())
        };
        let test_features = g
            .value(x_test.id)
            .clone()
            .into_shape_with_order((per, self.cfg.width))
            .unwrap();
        Ok(Prediction {
            w_cls: row(weights.cls),
            w_bbreg: row(weights.bbreg),
            scores,
            field,
            test_features,
        })
    }

    /// Backbone tokens of a patch, (H·W, width), evaluation mode.
    pub fn backbone_features(&self, patch: &Array3<f64>) -> Result<Array2<f64>> {
        self.check_patch(patch)?;
        let mut g = Graph::new(false);
        let mut b = Binder::new(&self.store, false);
        let p = g.input(patch_to_input(patch));
        let x = self.backbone.forward(&mut g, &mut b, p);
        let dim = (x.h * x.w, self.cfg.width);
        Ok(g.value(x.id).clone().into_shape_with_order(dim).unwrap())
    }
}

/// Small configuration for fast crate-internal tests.
#[cfg(test)]
pub(crate) fn tiny_test_config() -> ModelConfig {
    ModelConfig {
        width: 8,
        backbone_channels: 4,
        patch_px: 32,
        box_head_width: 4,
        extent_hidden1: 6,
        extent_hidden2: 8,
        transformer: TransformerConfig {
            heads: 2,
            ffn_width: 16,
            dropout: 0.1,
            enc_layers: 1,
            dec_layers: 1,
            shared_query: true,
            two_queries: false,
        },
        ..ModelConfig::default()
    }
}
