//! From raw patches to annotated token maps.
//!
//! Feature cells are kept token-major throughout: a map of H×W cells with C
//! channels is an (H·W, C) matrix in row-major cell order, so cell (r,c) is
//! row r·W + c. Training-frame tokens carry the target annotation (Gaussian
//! score encoding plus the box-extent encoding); the test frame carries a
//! learned marker embedding instead.

use crate::geometry::{DenseLtrb, GaussianLabel};
use crate::graph::{Graph, TensorId};
use crate::nn::{Binder, ColNorm, Conv2dLayer, Linear, ParamStore};
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

/// In-graph token map with its grid geometry.
#[derive(Debug, Clone, Copy)]
pub struct Tokens {
    pub id: TensorId,
    pub h: usize,
    pub w: usize,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Strided convolutional feature extractor: `blocks` stride-2 convolutions
/// with rectifiers, then a 1×1 projection to the model width. Total stride is
/// 2^blocks (16 with the default four blocks).
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    convs: Vec<Conv2dLayer>,
    reduce: Conv2dLayer,
    pub stride: usize,
    pub width: usize,
}

impl TinyBackbone {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        width: usize,
    ) -> Self {
        let blocks = 4;
        let mut convs = Vec::with_capacity(blocks);
        let mut cin = 3;
        for i in 0..blocks {
            convs.push(Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.c{i}"),
                cin,
                channels,
                3,
                2,
                1,
            ));
            cin = channels;
        }
        let reduce = Conv2dLayer::init(store, rng, &format!("{name}.reduce"), channels, width, 1, 1, 0);
        TinyBackbone {
            convs,
            reduce,
            stride: 1 << blocks,
            width,
        }
    }

    /// patch (3,P,P) with P divisible by the stride -> (H·W, width) tokens.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, patch: TensorId) -> Tokens {
        let shape = g.value(patch).shape().to_vec();
        assert_eq!(shape.len(), 3, "backbone input must be (3,H,W)");
        assert!(
            shape[1] % self.stride == 0 && shape[2] % self.stride == 0,
            "patch {}x{} not divisible by stride {}",
            shape[1],
            shape[2],
            self.stride
        );
        let mut x = patch;
        for conv in &self.convs {
            x = conv.forward(g, b, x);
            x = g.relu(x);
        }
        let x = self.reduce.forward(g, b, x);
        let (h, w) = (shape[1] / self.stride, shape[2] / self.stride);
        let flat = g.reshape(x, &[self.width, h * w]);
        let t = g.transpose2(flat);
        Tokens { id: t, h, w }
    }
}

/// Box-extent encoder: an MLP over each cell's 4-vector of side distances,
/// affine + per-channel normalization + rectifier twice, then a bare affine
/// up to the model width.
#[derive(Debug, Clone)]
pub struct ExtentMlp {
    l1: Linear,
    n1: ColNorm,
    l2: Linear,
    n2: ColNorm,
    l3: Linear,
}

impl ExtentMlp {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        hidden1: usize,
        hidden2: usize,
        width: usize,
    ) -> Self {
        ExtentMlp {
            l1: Linear::init(store, rng, &format!("{name}.l1"), 4, hidden1),
            n1: ColNorm::init(store, &format!("{name}.n1"), hidden1),
            l2: Linear::init(store, rng, &format!("{name}.l2"), hidden1, hidden2),
            n2: ColNorm::init(store, &format!("{name}.n2"), hidden2),
            l3: Linear::init(store, rng, &format!("{name}.l3"), hidden2, width),
        }
    }

    /// d (M,4) -> (M,width); the normalization population is the M cells.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, d: TensorId) -> TensorId {
        let x = self.l1.forward(g, b, d);
        let x = self.n1.forward(g, b, x);
        let x = g.relu(x);
        let x = self.l2.forward(g, b, x);
        let x = self.n2.forward(g, b, x);
        let x = g.relu(x);
        self.l3.forward(g, b, x)
    }
}

/// Gaussian label as a flat (H·W,) constant in the cell order of [`Tokens`].
pub fn label_to_flat(label: &GaussianLabel) -> Array1<f64> {
    Array1::from_iter(label.values.iter().copied())
}

/// Side-distance field (4,H,W) as a cell-major (H·W, 4) constant.
pub fn ltrb_to_cells(d: &DenseLtrb) -> Array2<f64> {
    let (_, h, w) = d.values.dim();
    Array2::from_shape_fn((h * w, 4), |(cell, ch)| {
        d.values[(ch, cell / w, cell % w)]
    })
}

/// Target-location encoding: y·e_fg per cell, plus (1−y)·e_bg when a
/// background embedding participates.
pub fn encode_location(
    g: &mut Graph,
    y: TensorId,
    e_fg: TensorId,
    e_bg: Option<TensorId>,
) -> TensorId {
    let fg = g.outer(y, e_fg);
    match e_bg {
        None => fg,
        Some(bg) => {
            let neg = g.scale(y, -1.0);
            let inv = g.add_const(neg, 1.0);
            let bgm = g.outer(inv, bg);
            g.add(fg, bgm)
        }
    }
}

/// Training-frame tokens: features + location encoding + extent encoding.
/// `extent` is None under the ablation that drops the box-extent term.
pub fn assemble_train_tokens(
    g: &mut Graph,
    b: &mut Binder,
    x: Tokens,
    y: TensorId,
    d: Option<TensorId>,
    mlp: &ExtentMlp,
    e_fg: TensorId,
    e_bg: Option<TensorId>,
) -> Tokens {
    let psi = encode_location(g, y, e_fg, e_bg);
    let mut v = g.add(x.id, psi);
    if let Some(d) = d {
        let phi = mlp.forward(g, b, d);
        v = g.add(v, phi);
    }
    Tokens { id: v, ..x }
}

/// Test-frame tokens: features + the broadcast test marker.
pub fn assemble_test_tokens(g: &mut Graph, x: Tokens, e_test: TensorId) -> Tokens {
    let v = g.add_row(x.id, e_test);
    Tokens { id: v, ..x }
}

/// Fixed two-dimensional sinusoidal positional table, (H·W, C) in cell order.
/// First C/2 channels encode the row coordinate, the rest the column, each as
/// interleaved sine/cosine pairs over a geometric frequency ladder.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Array2<f64> {
    assert!(c % 4 == 0, "positional encoding needs width divisible by 4, got {c}");
    let half = c / 2;
    let temperature: f64 = 10000.0;
    let two_pi = std::f64::consts::TAU;
    let dim_t: Vec<f64> = (0..half)
        .map(|i| temperature.powf((2 * (i / 2)) as f64 / half as f64))
        .collect();
    let mut out = Array2::<f64>::zeros((h * w, c));
    for r in 0..h {
        let ye = (r as f64 + 0.5) / h as f64 * two_pi;
        for cc in 0..w {
            let xe = (cc as f64 + 0.5) / w as f64 * two_pi;
            let row = r * w + cc;
            for i in 0..half {
                let (vy, vx) = (ye / dim_t[i], xe / dim_t[i]);
                let (py, px) = if i % 2 == 0 {
                    (vy.sin(), vx.sin())
                } else {
                    (vy.cos(), vx.cos())
                };
                out[(row, i)] = py;
                out[(row, half + i)] = px;
            }
        }
    }
    out
}
