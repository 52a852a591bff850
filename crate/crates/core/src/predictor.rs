//! Transformer that turns annotated frame tokens into model weights.
//!
//! All training frames' tokens and the test frame's tokens are concatenated
//! into one sequence and self-attended jointly; a learned query then reads
//! the predicted model out of the encoded sequence through cross-attention.
//! A boolean padding mask can remove whole frames from attention without
//! rebuilding the sequence, which is what the two-stage prediction at track
//! time relies on.

use crate::encoding::Tokens;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::nn::{Binder, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// decoder query is the foreground embedding itself (vs. a separate one)
    pub shared_query: bool,
    /// two independent queries emit classifier/regressor weights directly,
    /// skipping the split layer
    pub two_queries: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            heads: 8,
            ffn_width: 2048,
            dropout: 0.1,
            enc_layers: 2,
            dec_layers: 2,
            shared_query: true,
            two_queries: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameTag {
    Train(usize),
    Test,
}

#[derive(Debug, Clone)]
pub struct FrameSpan {
    pub tag: FrameTag,
    pub start: usize,
    pub end: usize,
}

/// Concatenated frame tokens plus the attention padding mask.
pub struct TokenSequence {
    pub id: TensorId,
    pub mask: Vec<bool>,
    pub spans: Vec<FrameSpan>,
    pub h: usize,
    pub w: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Token range of the test frame.
    pub fn test_span(&self) -> &FrameSpan {
        self.spans
            .iter()
            .find(|s| s.tag == FrameTag::Test)
            .expect("sequence always carries a test frame")
    }
}

/// Flattens train maps and the test map into one tagged sequence.
/// `masked_frames` lists training-frame indices excluded from attention.
pub fn build_sequence(
    g: &mut Graph,
    v_train: &[Tokens],
    v_test: Tokens,
    masked_frames: &[usize],
) -> Result<TokenSequence> {
    if v_train.is_empty() {
        return Err(Error::InvalidArgument(
            "token sequence needs at least one training frame".into(),
        ));
    }
    let (h, w) = (v_test.h, v_test.w);
    for t in v_train {
        if (t.h, t.w) != (h, w) {
            return Err(Error::InvalidArgument(format!(
                "frame grid {}x{} does not match test grid {}x{}",
                t.h, t.w, h, w
            )));
        }
    }
    for &f in masked_frames {
        if f >= v_train.len() {
            return Err(Error::InvalidArgument(format!(
                "masked frame {f} out of range ({} train frames)",
                v_train.len()
            )));
        }
    }
    let per = h * w;
    let mut ids: Vec<TensorId> = v_train.iter().map(|t| t.id).collect();
    ids.push(v_test.id);
    let id = g.concat_rows(&ids);

    let mut mask = Vec::with_capacity((v_train.len() + 1) * per);
    let mut spans = Vec::with_capacity(v_train.len() + 1);
    for (i, _) in v_train.iter().enumerate() {
        let start = i * per;
        spans.push(FrameSpan {
            tag: FrameTag::Train(i),
            start,
            end: start + per,
        });
        let excluded = masked_frames.contains(&i);
        mask.extend(std::iter::repeat(excluded).take(per));
    }
    let start = v_train.len() * per;
    spans.push(FrameSpan {
        tag: FrameTag::Test,
        start,
        end: start + per,
    });
    mask.extend(std::iter::repeat(false).take(per));

    Ok(TokenSequence {
        id,
        mask,
        spans,
        h,
        w,
    })
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    lin1: Linear,
    lin2: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    lin1: Linear,
    lin2: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
}

/// Post-norm transformer; positions enter queries and keys only, never the
/// value stream.
#[derive(Debug, Clone)]
pub struct Transformer {
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    pub width: usize,
    pub cfg: TransformerConfig,
}

impl Transformer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        width: usize,
        cfg: TransformerConfig,
    ) -> Self {
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("{name}.enc{i}");
                EncoderLayer {
                    attn: MultiHeadAttention::init(store, rng, &format!("{p}.attn"), width, cfg.heads),
                    lin1: Linear::init(store, rng, &format!("{p}.ffn1"), width, cfg.ffn_width),
                    lin2: Linear::init(store, rng, &format!("{p}.ffn2"), cfg.ffn_width, width),
                    ln1: LayerNorm::init(store, &format!("{p}.ln1"), width),
                    ln2: LayerNorm::init(store, &format!("{p}.ln2"), width),
                }
            })
            .collect();
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("{name}.dec{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::init(store, rng, &format!("{p}.self"), width, cfg.heads),
                    cross_attn: MultiHeadAttention::init(store, rng, &format!("{p}.cross"), width, cfg.heads),
                    lin1: Linear::init(store, rng, &format!("{p}.ffn1"), width, cfg.ffn_width),
                    lin2: Linear::init(store, rng, &format!("{p}.ffn2"), cfg.ffn_width, width),
                    ln1: LayerNorm::init(store, &format!("{p}.ln1"), width),
                    ln2: LayerNorm::init(store, &format!("{p}.ln2"), width),
                    ln3: LayerNorm::init(store, &format!("{p}.ln3"), width),
                }
            })
            .collect();
        let dec_norm = LayerNorm::init(store, &format!("{name}.norm"), width);
        Transformer {
            enc,
            dec,
            dec_norm,
            width,
            cfg,
        }
    }

    fn ffn(
        g: &mut Graph,
        b: &mut Binder,
        lin1: &Linear,
        lin2: &Linear,
        x: TensorId,
        p: f64,
        rng: &mut ChaCha12Rng,
    ) -> TensorId {
        let f = lin1.forward(g, b, x);
        let f = g.relu(f);
        let f = g.dropout(f, p, rng);
        lin2.forward(g, b, f)
    }

    /// Joint self-attention over the whole sequence; returns a sequence with
    /// the same mask and spans over the encoded tokens.
    pub fn encode_joint(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        seq: &TokenSequence,
        pos: TensorId,
        rng: &mut ChaCha12Rng,
    ) -> TokenSequence {
        assert_eq!(
            g.value(seq.id).shape()[0],
            seq.mask.len(),
            "sequence/mask length mismatch"
        );
        let p = self.cfg.dropout;
        let mut src = seq.id;
        for layer in &self.enc {
            let q = g.add(src, pos);
            let attn = layer.attn.forward(g, b, q, q, src, Some(&seq.mask), p, rng);
            let a = g.dropout(attn.out, p, rng);
            let s = g.add(src, a);
            let s = layer.ln1.forward(g, b, s);
            let f = Self::ffn(g, b, &layer.lin1, &layer.lin2, s, p, rng);
            let f = g.dropout(f, p, rng);
            let s2 = g.add(s, f);
            src = layer.ln2.forward(g, b, s2);
        }
        TokenSequence {
            id: src,
            mask: seq.mask.clone(),
            spans: seq.spans.clone(),
            h: seq.h,
            w: seq.w,
        }
    }

    /// Reads model weights out of the encoded sequence with `queries` (one
    /// row per query, used DETR-style as query positions over a zero target
    /// stream). Returns one output row per query.
    pub fn decode_model(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        z: &TokenSequence,
        queries: TensorId,
        pos: TensorId,
        rng: &mut ChaCha12Rng,
    ) -> TensorId {
        let nq = g.value(queries).shape()[0];
        let p = self.cfg.dropout;
        let zero = ndarray::ArrayD::zeros(ndarray::IxDyn(&[nq, self.width]));
        let mut tgt = g.input(zero);
        for layer in &self.dec {
            let q = g.add(tgt, queries);
            let sa = layer.self_attn.forward(g, b, q, q, tgt, None, p, rng);
            let a = g.dropout(sa.out, p, rng);
            let t = g.add(tgt, a);
            let t = layer.ln1.forward(g, b, t);

            let qc = g.add(t, queries);
            let mem_k = g.add(z.id, pos);
            let ca = layer
                .cross_attn
                .forward(g, b, qc, mem_k, z.id, Some(&z.mask), p, rng);
            let a = g.dropout(ca.out, p, rng);
            let t2 = g.add(t, a);
            let t2 = layer.ln2.forward(g, b, t2);

            let f = Self::ffn(g, b, &layer.lin1, &layer.lin2, t2, p, rng);
            let f = g.dropout(f, p, rng);
            let t3 = g.add(t2, f);
            tgt = layer.ln3.forward(g, b, t3);
        }
        self.dec_norm.forward(g, b, tgt)
    }
}

/// In-graph handles to the two predicted weight vectors, one row each.
pub struct PredictedWeights {
    pub cls: TensorId,
    pub bbreg: TensorId,
}

/// The affine map from the decoder output to both weight vectors.
#[derive(Debug, Clone)]
pub struct WeightSplit {
    lin: Linear,
    width: usize,
}

impl WeightSplit {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, width: usize) -> Self {
        WeightSplit {
            lin: Linear::init(store, rng, name, width, 2 * width),
            width,
        }
    }

    /// w (1,C) -> (w_cls (1,C), w_bbreg (1,C))
    pub fn split(&self, g: &mut Graph, b: &mut Binder, w: TensorId) -> PredictedWeights {
        let both = self.lin.forward(g, b, w);
        PredictedWeights {
            cls: g.slice_cols(both, 0, self.width),
            bbreg: g.slice_cols(both, self.width, 2 * self.width),
        }
    }
}
