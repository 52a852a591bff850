//! Named parameters, layer builders and the optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names; layers are
//! lightweight descriptors that know their names and how to splice themselves
//! into a [`Graph`]. A [`Binder`] memoizes store lookups per graph so a
//! parameter used twice becomes a single tape leaf and its gradient
//! accumulates.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.params.get_mut(name)
    }

    /// Sorted iteration; the order is the on-disk layout.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    /// Replaces an existing entry, checking the shape matches.
    pub fn load(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        match self.params.get_mut(name) {
            None => Err(Error::checkpoint(format!("unknown parameter `{name}`"))),
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        name: name.to_string(),
                        expected: slot.shape().to_vec(),
                        got: value.shape().to_vec(),
                    });
                }
                *slot = value;
                Ok(())
            }
        }
    }
}

/// Splices store parameters into one graph, deduplicating by name.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: HashMap<String, TensorId>,
    trainable: bool,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str) -> TensorId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
            .clone();
        let id = if self.trainable {
            g.param(value)
        } else {
            g.input(value)
        };
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Gradients of every bound parameter after a backward pass. Parameters
    /// the loss never touched get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, ArrayD<f64>> {
        self.bound
            .iter()
            .map(|(name, &id)| {
                let grad = g
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(id).raw_dim()));
                (name.clone(), grad)
            })
            .collect()
    }
}

// ---- initializers ----

pub fn uniform(rng: &mut ChaCha12Rng, shape: &[usize], limit: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

pub fn normal(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    // Box-Muller; two uniforms per sample, one output kept.
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

// ---- layers ----

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        store.insert(&format!("{name}.w"), uniform(rng, &[out_dim, in_dim], limit));
        store.insert(&format!("{name}.b"), zeros(&[out_dim]));
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    /// x (M,in) -> (M,out)
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: TensorId) -> TensorId {
        let w = b.bind(g, &format!("{}.w", self.name));
        let bias = b.bind(g, &format!("{}.b", self.name));
        let y = g.matmul_nt(x, w);
        g.add_row(y, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let limit = (6.0 / fan_in).sqrt();
        store.insert(&format!("{name}.w"), uniform(rng, &[cout, cin, k, k], limit));
        store.insert(&format!("{name}.b"), zeros(&[cout]));
        Conv2dLayer {
            name: name.to_string(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: TensorId) -> TensorId {
        let w = b.bind(g, &format!("{}.w", self.name));
        let bias = b.bind(g, &format!("{}.b", self.name));
        g.conv2d(x, w, bias, self.stride, self.pad)
    }
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        store.insert(&format!("{name}.g"), ones(&[dim]));
        store.insert(&format!("{name}.b"), zeros(&[dim]));
        LayerNorm {
            name: name.to_string(),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: TensorId) -> TensorId {
        let gamma = b.bind(g, &format!("{}.g", self.name));
        let beta = b.bind(g, &format!("{}.b", self.name));
        g.layer_norm_rows(x, gamma, beta, NORM_EPS)
    }
}

/// Per-channel normalization over whatever population the rows form: spatial
/// cells for feature maps, the sample batch for vector inputs.
#[derive(Debug, Clone)]
pub struct ColNorm {
    pub name: String,
    pub dim: usize,
}

impl ColNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        store.insert(&format!("{name}.g"), ones(&[dim]));
        store.insert(&format!("{name}.b"), zeros(&[dim]));
        ColNorm {
            name: name.to_string(),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: TensorId) -> TensorId {
        let gamma = b.bind(g, &format!("{}.g", self.name));
        let beta = b.bind(g, &format!("{}.b", self.name));
        g.norm_cols(x, gamma, beta, NORM_EPS)
    }
}

pub struct MhaOut {
    pub out: TensorId,
    /// one (Lq,Lk) attention matrix per head
    pub attn: Vec<TensorId>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "model width {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::init(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::init(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::init(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::init(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// `key_mask[j] == true` removes key/value j for every query. Positional
    /// terms are added by the caller to `query`/`key` only, so `value` is the
    /// un-encoded content stream.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        query: TensorId,
        key: TensorId,
        value: TensorId,
        key_mask: Option<&[bool]>,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> MhaOut {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qp = self.q.forward(g, b, query);
        let kp = self.k.forward(g, b, key);
        let vp = self.v.forward(g, b, value);

        let mut attn_ids = Vec::with_capacity(self.heads);
        let mut head_outs_t = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(qp, lo, hi);
            let kh = g.slice_cols(kp, lo, hi);
            let vh = g.slice_cols(vp, lo, hi);
            let scores = g.matmul_nt(qh, kh);
            let scaled = g.scale(scores, scale);
            let weights = g.softmax_rows(scaled, key_mask);
            attn_ids.push(weights);
            let weights = g.dropout(weights, dropout, rng);
            let ctx = g.matmul(weights, vh);
            head_outs_t.push(g.transpose2(ctx));
        }
        // heads concatenate along channels; stitched via the transposed layout
        let stacked = g.concat_rows(&head_outs_t);
        let merged = g.transpose2(stacked);
        let out = self.o.forward(g, b, merged);
        MhaOut {
            out,
            attn: attn_ids,
        }
    }
}

// ---- optimizer ----

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
    pub t: u64,
}

impl AdamW {
    /// One decoupled-decay update. `lr_scale` multiplies the base rate so a
    /// schedule can anneal without rebuilding the optimizer.
    pub fn step(
        &self,
        state: &mut OptState,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr_scale: f64,
    ) {
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr * lr_scale;
        for (name, grad) in grads {
            let p = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer: unknown parameter `{name}`"));
            let m = state
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = state
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn binder_dedupes_and_accumulates_shared_param() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
        let mut g = Graph::new(true);
        let mut b = Binder::new(&store, true);
        let w1 = b.bind(&mut g, "w");
        let w2 = b.bind(&mut g, "w");
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2);
        let l = g.sum_all(y);
        g.backward(l);
        let grads = b.grads(&g);
        // d(w^2)/dw = 2w through both uses of the same leaf
        assert_eq!(grads["w"][[0, 0]], 3.0);
    }

    #[test]
    fn binder_eval_mode_blocks_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let mut g = Graph::new(false);
        let mut b = Binder::new(&store, false);
        let w = b.bind(&mut g, "w");
        let y = g.mul(w, w);
        let l = g.sum_all(y);
        assert!(std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut g2 = Graph::new(false);
            let mut b2 = Binder::new(&store, false);
            let w2 = b2.bind(&mut g2, "w");
            let y2 = g2.mul(w2, w2);
            let l2 = g2.sum_all(y2);
            g2.backward(l2);
        }))
        .is_err());
        let _ = (y, l);
    }

    #[test]
    fn mha_rows_sum_to_one_and_masked_keys_get_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, &mut rng, "attn", 8, 2);
        let mut g = Graph::new(false);
        let mut b = Binder::new(&store, false);
        let x = g.input(normal(&mut rng, &[6, 8], 1.0));
        let mask = [false, false, true, false, true, false];
        let out = mha.forward(&mut g, &mut b, x, x, x, Some(&mask), 0.0, &mut rng);
        assert_eq!(g.value(out.out).shape(), &[6, 8]);
        for &a in &out.attn {
            let av = g.value(a);
            for r in 0..6 {
                let sum: f64 = (0..6).map(|c| av[[r, c]]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert_eq!(av[[r, 2]], 0.0);
                assert_eq!(av[[r, 4]], 0.0);
            }
        }
    }

    #[test]
    fn adamw_decay_shrinks_untouched_weight() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let opt = AdamW::new(0.1, 0.5);
        let mut state = OptState::default();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::zeros(IxDyn(&[1])));
        opt.step(&mut state, &mut store, &grads, 1.0);
        // zero gradient: only the decoupled decay acts, p -= lr*wd*p
        let w = store.get("w").unwrap()[[0]];
        assert!((w - 0.95).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_size_is_lr() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let opt = AdamW::new(0.01, 0.0);
        let mut state = OptState::default();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[1]), 3.7));
        opt.step(&mut state, &mut store, &grads, 1.0);
        // bias correction makes the first unscaled step ~= lr * sign(g)
        let w = store.get("w").unwrap()[[0]];
        assert!((w + 0.01).abs() < 1e-6, "got {w}");
    }

    #[test]
    fn normal_init_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = normal(&mut rng, &[20000], 0.7);
        let mean = x.mean().unwrap();
        let var = x.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        assert!(mean.abs() < 0.02);
        assert!((var.sqrt() - 0.7).abs() < 0.02);
    }
}
