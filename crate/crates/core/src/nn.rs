//! Minimal dense layers with explicit backward passes.
//!
//! Activations are row-major `(positions × features)` matrices. Every layer
//! returns a cache from `forward` that its `backward` consumes; gradients are
//! accumulated into a same-shaped parameter struct.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Visitor over named parameter tensors, in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, data| n += data.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, _, data| data.fill(value));
    }

    /// `self += alpha · other`; both must have the same layout.
    fn add_scaled(&mut self, other: &Self, alpha: f64)
    where
        Self: Sized,
    {
        let mut flat = Vec::new();
        other.visit("", &mut |_, _, data| flat.push(data.to_vec()));
        let mut it = flat.into_iter();
        self.visit_mut("", &mut |name, _, data| {
            let src = it.next().unwrap_or_else(|| panic!("layout mismatch at {name}"));
            for (d, s) in data.iter_mut().zip(src) {
                *d += alpha * s;
            }
        });
    }

    fn sum_of_squares(&self) -> f64 {
        let mut total = 0.0;
        self.visit("", &mut |_, _, data| total += data.iter().map(|v| v * v).sum::<f64>());
        total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_array1(prefix: &str, name: &str, a: &Array1<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(&join(prefix, name), a.shape(), a.as_slice().expect("contiguous"));
}

pub(crate) fn visit_array2(prefix: &str, name: &str, a: &Array2<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(&join(prefix, name), a.shape(), a.as_slice().expect("contiguous"));
}

pub(crate) fn visit_array1_mut(
    prefix: &str,
    name: &str,
    a: &mut Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(&join(prefix, name), &shape, a.as_slice_mut().expect("contiguous"));
}

pub(crate) fn visit_array2_mut(
    prefix: &str,
    name: &str,
    a: &mut Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(&join(prefix, name), &shape, a.as_slice_mut().expect("contiguous"));
}

pub(crate) fn normal_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Row-wise softmax, in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Fixed sinusoidal position encodings, `positions × d`.
pub fn sinusoidal_positions(positions: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((positions, d));
    for pos in 0..positions {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: normal_matrix(input, output, 1.0 / (input as f64).sqrt(), rng),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(prefix, "w", &self.w, f);
        visit_array1(prefix, "b", &self.b, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(prefix, "w", &mut self.w, f);
        visit_array1_mut(prefix, "b", &mut self.b, f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, slot) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            *slot = inv;
        }
        let y = &normalized * &self.gain + &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let g = dxhat.row(r);
            let xh = cache.normalized.row(r);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let inv = cache.inv_std[r];
            let mut out = dx.row_mut(r);
            for i in 0..g.len() {
                out[i] = inv * (g[i] - mean_g - xh[i] * mean_gx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array1(prefix, "gain", &self.gain, f);
        visit_array1(prefix, "bias", &self.bias, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array1_mut(prefix, "gain", &mut self.gain, f);
        visit_array1_mut(prefix, "bias", &mut self.bias, f);
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy)]
pub enum AttentionMask<'a> {
    /// Keys flagged `false` are hidden from every query.
    Keys(&'a [bool]),
    /// Query `i` sees keys `0..=i`.
    Causal,
}

impl AttentionMask<'_> {
    fn allows(&self, query: usize, key: usize) -> bool {
        match self {
            AttentionMask::Keys(valid) => valid[key],
            AttentionMask::Causal => key <= query,
        }
    }
}

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Array2<f64>,
    mixed: Array2<f64>,
}

impl Attention {
    pub fn zeros(d: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }

    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
        }
    }

    pub fn forward(&self, xq: &Array2<f64>, xkv: &Array2<f64>, mask: AttentionMask) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(&xq.view());
        let k = self.key.forward(&xkv.view());
        let v = self.value.forward(&xkv.view());
        let scale = 1.0 / (q.ncols() as f64).sqrt();
        let mut scores = q.dot(&k.t()) * scale;
        for ((i, j), s) in scores.indexed_iter_mut() {
            if !mask.allows(i, j) {
                *s = f64::NEG_INFINITY;
            }
        }
        softmax_rows(&mut scores);
        let weights = scores;
        let mixed = weights.dot(&v);
        let out = self.output.forward(&mixed.view());
        (out, AttentionCache { q, k, v, weights, mixed })
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        xq: &Array2<f64>,
        xkv: &Array2<f64>,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        grad: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (cache.q.ncols() as f64).sqrt();
        let dmixed = self.output.backward(&cache.mixed.view(), dout, &mut grad.output);
        let dweights = dmixed.dot(&cache.v.t());
        let dv = cache.weights.t().dot(&dmixed);
        // Softmax backward; masked entries have zero weight and drop out.
        let mut dscores = dweights;
        for (mut drow, wrow) in dscores.rows_mut().into_iter().zip(cache.weights.rows()) {
            let dot = drow.dot(&wrow);
            for (d, &w) in drow.iter_mut().zip(wrow.iter()) {
                *d = w * (*d - dot);
            }
        }
        dscores *= scale;
        let dq = dscores.dot(&cache.k);
        let dk = dscores.t().dot(&cache.q);
        let dxq = self.query.backward(&xq.view(), &dq, &mut grad.query);
        let dxkv = self.key.backward(&xkv.view(), &dk, &mut grad.key)
            + self.value.backward(&xkv.view(), &dv, &mut grad.value);
        (dxq, dxkv)
    }
}

impl Parameters for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Two-layer tanh feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

pub struct FeedForwardCache {
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            inner: Linear::zeros(d, hidden),
            outer: Linear::zeros(hidden, d),
        }
    }

    pub fn init<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::init(d, hidden, rng),
            outer: Linear::init(hidden, d, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let hidden = self.inner.forward(&x.view()).mapv(f64::tanh);
        let out = self.outer.forward(&hidden.view());
        (out, FeedForwardCache { hidden })
    }

    pub fn backward(&self, x: &Array2<f64>, cache: &FeedForwardCache, dout: &Array2<f64>, grad: &mut FeedForward) -> Array2<f64> {
        let dhidden = self.outer.backward(&cache.hidden.view(), dout, &mut grad.outer);
        let dpre = dhidden * &cache.hidden.mapv(|h| 1.0 - h * h);
        self.inner.backward(&x.view(), &dpre, &mut grad.inner)
    }
}

impl Parameters for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.inner.visit(&join(prefix, "inner"), f);
        self.outer.visit(&join(prefix, "outer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.inner.visit_mut(&join(prefix, "inner"), f);
        self.outer.visit_mut(&join(prefix, "outer"), f);
    }
}

/// Pre-norm encoder block: self-attention then feed-forward, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

pub struct EncoderLayerCache {
    attn_in: Array2<f64>,
    attn_norm: LayerNormCache,
    attn: AttentionCache,
    ffn_in: Array2<f64>,
    ffn_norm: LayerNormCache,
    ffn: FeedForwardCache,
}

impl EncoderLayer {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            attn_norm: LayerNorm::new(d),
            attn: Attention::zeros(d),
            ffn_norm: LayerNorm::new(d),
            ffn: FeedForward::zeros(d, hidden),
        }
    }

    pub fn init<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            attn_norm: LayerNorm::new(d),
            attn: Attention::init(d, rng),
            ffn_norm: LayerNorm::new(d),
            ffn: FeedForward::init(d, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, key_mask: &[bool]) -> (Array2<f64>, EncoderLayerCache) {
        let (attn_in, attn_norm) = self.attn_norm.forward(x);
        let (attn_out, attn) = self.attn.forward(&attn_in, &attn_in, AttentionMask::Keys(key_mask));
        let h = x + &attn_out;
        let (ffn_in, ffn_norm) = self.ffn_norm.forward(&h);
        let (ffn_out, ffn) = self.ffn.forward(&ffn_in);
        let out = h + &ffn_out;
        (
            out,
            EncoderLayerCache {
                attn_in,
                attn_norm,
                attn,
                ffn_in,
                ffn_norm,
                ffn,
            },
        )
    }

    pub fn backward(&self, cache: &EncoderLayerCache, dout: &Array2<f64>, grad: &mut EncoderLayer) -> Array2<f64> {
        let dffn_in = self.ffn.backward(&cache.ffn_in, &cache.ffn, dout, &mut grad.ffn);
        let dh = dout + &self.ffn_norm.backward(&cache.ffn_norm, &dffn_in, &mut grad.ffn_norm);
        let (dq, dkv) = self.attn.backward(&cache.attn_in, &cache.attn_in, &cache.attn, &dh, &mut grad.attn);
        let dattn_in = dq + dkv;
        dh + self.attn_norm.backward(&cache.attn_norm, &dattn_in, &mut grad.attn_norm)
    }
}

impl Parameters for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// encoder states, then feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub cross_norm: LayerNorm,
    pub cross_attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

pub struct DecoderLayerCache {
    self_in: Array2<f64>,
    self_norm: LayerNormCache,
    self_attn: AttentionCache,
    cross_in: Array2<f64>,
    cross_norm: LayerNormCache,
    cross_attn: AttentionCache,
    ffn_in: Array2<f64>,
    ffn_norm: LayerNormCache,
    ffn: FeedForwardCache,
}

impl DecoderLayer {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            self_norm: LayerNorm::new(d),
            self_attn: Attention::zeros(d),
            cross_norm: LayerNorm::new(d),
            cross_attn: Attention::zeros(d),
            ffn_norm: LayerNorm::new(d),
            ffn: FeedForward::zeros(d, hidden),
        }
    }

    pub fn init<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            self_norm: LayerNorm::new(d),
            self_attn: Attention::init(d, rng),
            cross_norm: LayerNorm::new(d),
            cross_attn: Attention::init(d, rng),
            ffn_norm: LayerNorm::new(d),
            ffn: FeedForward::init(d, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, memory: &Array2<f64>, memory_mask: &[bool]) -> (Array2<f64>, DecoderLayerCache) {
        let (self_in, self_norm) = self.self_norm.forward(x);
        let (self_out, self_attn) = self.self_attn.forward(&self_in, &self_in, AttentionMask::Causal);
        let h = x + &self_out;
        let (cross_in, cross_norm) = self.cross_norm.forward(&h);
        let (cross_out, cross_attn) = self.cross_attn.forward(&cross_in, memory, AttentionMask::Keys(memory_mask));
        let h = h + &cross_out;
        let (ffn_in, ffn_norm) = self.ffn_norm.forward(&h);
        let (ffn_out, ffn) = self.ffn.forward(&ffn_in);
        let out = h + &ffn_out;
        (
            out,
            DecoderLayerCache {
                self_in,
                self_norm,
                self_attn,
                cross_in,
                cross_norm,
                cross_attn,
                ffn_in,
                ffn_norm,
                ffn,
            },
        )
    }

    /// Returns `(d x, d memory)`.
    pub fn backward(
        &self,
        memory: &Array2<f64>,
        cache: &DecoderLayerCache,
        dout: &Array2<f64>,
        grad: &mut DecoderLayer,
    ) -> (Array2<f64>, Array2<f64>) {
        let dffn_in = self.ffn.backward(&cache.ffn_in, &cache.ffn, dout, &mut grad.ffn);
        let dh = dout + &self.ffn_norm.backward(&cache.ffn_norm, &dffn_in, &mut grad.ffn_norm);
        let (dcross_in, dmemory) =
            self.cross_attn
                .backward(&cache.cross_in, memory, &cache.cross_attn, &dh, &mut grad.cross_attn);
        let dh = dh + self.cross_norm.backward(&cache.cross_norm, &dcross_in, &mut grad.cross_norm);
        let (dq, dkv) = self
            .self_attn
            .backward(&cache.self_in, &cache.self_in, &cache.self_attn, &dh, &mut grad.self_attn);
        let dself_in = dq + dkv;
        let dx = dh + self.self_norm.backward(&cache.self_norm, &dself_in, &mut grad.self_norm);
        (dx, dmemory)
    }
}

impl Parameters for DecoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.self_norm.visit(&join(prefix, "self_norm"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.cross_norm.visit(&join(prefix, "cross_norm"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.self_norm.visit_mut(&join(prefix, "self_norm"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.cross_norm.visit_mut(&join(prefix, "cross_norm"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Copies rows `0..n` of `x` (used to strip padding before a head).
pub fn leading_rows(x: &Array2<f64>, n: usize) -> Array2<f64> {
    x.slice(s![..n, ..]).to_owned()
}
