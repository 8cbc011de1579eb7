//! The expert bundle: a small shared encoder-decoder backbone, K linear
//! pattern heads, and the pooler that scores source/target pairs against
//! the patterns.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, BOS, EOS, PAD, RESERVED};
use crate::error::{Error, Result};
use crate::nn::{
    join, leading_rows, log_softmax_rows, normal_matrix, sinusoidal_positions, visit_array1, visit_array1_mut,
    visit_array2, visit_array2_mut, DecoderLayer, DecoderLayerCache, EncoderLayer, EncoderLayerCache, LayerNorm,
    LayerNormCache, Linear, Parameters,
};
use crate::projection::{sparsegen_lin, LogitVector, ProjectionSolution, DEFAULT_LAMBDA};

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_D_MODEL: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// `L_input`: source positions including the appended end-of-sequence token.
    pub source_positions: usize,
    /// `L_output`: target positions including the end-of-sequence token.
    pub target_positions: usize,
    pub experts: usize,
    pub lambda: f64,
    pub gamma: f64,
}

impl ModelConfig {
    /// Config sized for sources of up to `max_source_tokens` and targets of up
    /// to `max_target_tokens`, with default width and hyperparameters.
    pub fn new(vocab_size: usize, max_source_tokens: usize, max_target_tokens: usize, experts: usize) -> Self {
        Self {
            vocab_size,
            d_model: DEFAULT_D_MODEL,
            ffn_hidden: 2 * DEFAULT_D_MODEL,
            encoder_layers: DEFAULT_LAYERS,
            decoder_layers: DEFAULT_LAYERS,
            source_positions: max_source_tokens + 1,
            target_positions: max_target_tokens + 1,
            experts,
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn with_width(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.ffn_hidden = 2 * d_model;
        self
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.encoder_layers = layers;
        self.decoder_layers = layers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.experts < 2 {
            return bad(format!("need at least 2 experts, got {}", self.experts));
        }
        if !(self.lambda < 1.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be < 1, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.d_model == 0 || self.ffn_hidden == 0 {
            return bad("model width must be positive".into());
        }
        if self.vocab_size <= RESERVED.len() {
            return bad(format!("vocabulary of {} has no words beyond the reserved tokens", self.vocab_size));
        }
        if self.source_positions < 2 || self.target_positions < 2 {
            return bad("source and target need at least one token plus end-of-sequence".into());
        }
        Ok(())
    }
}

/// Pooling parameters that turn encoder and decoder states into pattern logits:
/// `z = [E_encᵀ·w_enc ; E_decᵀ·w_dec]·w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternPooler {
    pub w_enc: Array1<f64>,
    pub w_dec: Array1<f64>,
    /// `2·d_model × K`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl PatternPooler {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            w_enc: Array1::zeros(config.source_positions),
            w_dec: Array1::zeros(config.target_positions),
            w: Array2::zeros((2 * config.d_model, config.experts)),
            b: Array1::zeros(config.experts),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w.nrows() / 2
    }

    pub fn experts(&self) -> usize {
        self.w.ncols()
    }
}

impl Parameters for PatternPooler {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array1(prefix, "w_enc", &self.w_enc, f);
        visit_array1(prefix, "w_dec", &self.w_dec, f);
        visit_array2(prefix, "w", &self.w, f);
        visit_array1(prefix, "b", &self.b, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array1_mut(prefix, "w_enc", &mut self.w_enc, f);
        visit_array1_mut(prefix, "w_dec", &mut self.w_dec, f);
        visit_array2_mut(prefix, "w", &mut self.w, f);
        visit_array1_mut(prefix, "b", &mut self.b, f);
    }
}

/// Every trainable tensor of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Token embeddings shared by encoder and decoder, `V × d`.
    pub embed: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    /// Pattern heads `h_1..h_K`, each `d × V` plus bias.
    pub heads: Vec<Linear>,
    pub pooler: PatternPooler,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            embed: Array2::zeros((config.vocab_size, d)),
            encoder: (0..config.encoder_layers)
                .map(|_| EncoderLayer::zeros(d, config.ffn_hidden))
                .collect(),
            encoder_norm: LayerNorm::new(d),
            decoder: (0..config.decoder_layers)
                .map(|_| DecoderLayer::zeros(d, config.ffn_hidden))
                .collect(),
            decoder_norm: LayerNorm::new(d),
            heads: (0..config.experts).map(|_| Linear::zeros(d, config.vocab_size)).collect(),
            pooler: PatternPooler::zeros(config),
        }
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embed = normal_matrix(config.vocab_size, d, 1.0, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderLayer::init(d, config.ffn_hidden, &mut rng))
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer::init(d, config.ffn_hidden, &mut rng))
            .collect();
        // Heads start identical. Independently drawn heads differ by whole nats
        // of cross-entropy before training, which hands every sample to one
        // head and empties the projection support before routing can learn.
        let head = Linear::init(d, config.vocab_size, &mut rng);
        let heads = vec![head; config.experts];
        let pooler = PatternPooler {
            w_enc: Array1::from_elem(config.source_positions, 1.0 / config.source_positions as f64),
            w_dec: Array1::from_elem(config.target_positions, 1.0 / config.target_positions as f64),
            w: normal_matrix(2 * d, config.experts, 0.1 / ((2 * d) as f64).sqrt(), &mut rng),
            b: Array1::zeros(config.experts),
        };
        Self {
            embed,
            encoder,
            encoder_norm: LayerNorm::new(d),
            decoder,
            decoder_norm: LayerNorm::new(d),
            heads,
            pooler,
        }
    }

    /// Copy of `self` with every entry zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }
}

impl Parameters for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(prefix, "embed", &self.embed, f);
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.encoder_norm.visit(&join(prefix, "encoder_norm"), f);
        for (i, layer) in self.decoder.iter().enumerate() {
            layer.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.decoder_norm.visit(&join(prefix, "decoder_norm"), f);
        for (i, head) in self.heads.iter().enumerate() {
            head.visit(&join(prefix, &format!("heads.{i}")), f);
        }
        self.pooler.visit(&join(prefix, "pooler"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(prefix, "embed", &mut self.embed, f);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.encoder_norm.visit_mut(&join(prefix, "encoder_norm"), f);
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.decoder_norm.visit_mut(&join(prefix, "decoder_norm"), f);
        for (i, head) in self.heads.iter_mut().enumerate() {
            head.visit_mut(&join(prefix, &format!("heads.{i}")), f);
        }
        self.pooler.visit_mut(&join(prefix, "pooler"), f);
    }
}

/// Optimizer bookkeeping persisted with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Word position of the shuffling RNG stream.
    pub rng_word_pos: u128,
}

impl TrainState {
    pub fn new(seed: u64, learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            seed,
            rng_word_pos: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub state: TrainState,
}

/// One training example as raw token ids, without special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl ExpertBundle {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Shape(format!(
                "vocabulary has {} tokens but config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let params = ModelParams::init(&config, seed);
        Ok(Self {
            config,
            vocab,
            params,
            state: TrainState::new(seed, crate::train::DEFAULT_LEARNING_RATE),
        })
    }

    pub fn experts(&self) -> usize {
        self.config.experts
    }

    /// Tilts the initial routing towards `favored` by adding `bias` to its
    /// pooler bias. Small biases keep every expert in the initial support.
    pub fn bias_routing(&mut self, favored: usize, bias: f64) {
        self.params.pooler.b[favored] += bias;
    }

    pub(crate) fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::InvalidToken {
                id,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        let d = self.config.d_model;
        let mut x = sinusoidal_positions(ids.len(), d);
        for (mut row, &id) in x.rows_mut().into_iter().zip(ids) {
            row += &self.params.embed.row(id as usize);
        }
        x
    }

    /// Runs the encoder over `ids`; pad tokens are hidden from attention keys.
    pub(crate) fn encode(&self, ids: &[u32]) -> (Array2<f64>, EncoderTrace) {
        let mask: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
        let mut h = self.embed(ids);
        let mut layers = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            let (next, cache) = layer.forward(&h, &mask);
            layers.push(cache);
            h = next;
        }
        let (out, norm) = self.params.encoder_norm.forward(&h);
        (
            out,
            EncoderTrace {
                ids: ids.to_vec(),
                mask,
                layers,
                norm,
            },
        )
    }

    /// Runs the causal decoder over `ids` attending to `memory`.
    pub(crate) fn decode(&self, ids: &[u32], memory: &Array2<f64>, memory_mask: &[bool]) -> (Array2<f64>, DecoderTrace) {
        let mut h = self.embed(ids);
        let mut layers = Vec::with_capacity(self.params.decoder.len());
        for layer in &self.params.decoder {
            let (next, cache) = layer.forward(&h, memory, memory_mask);
            layers.push(cache);
            h = next;
        }
        let (out, norm) = self.params.decoder_norm.forward(&h);
        (out, DecoderTrace { ids: ids.to_vec(), layers, norm })
    }

    /// Source ids with end-of-sequence appended, right-padded to `L_input`.
    pub fn padded_source(&self, source: &[u32]) -> Result<Vec<u32>> {
        let limit = self.config.source_positions;
        if source.is_empty() {
            return Err(Error::InvalidInput("source must be non-empty".into()));
        }
        if source.len() + 1 > limit {
            return Err(Error::Shape(format!(
                "source of {} tokens exceeds L_input = {limit} (including end-of-sequence)",
                source.len()
            )));
        }
        self.check_tokens(source)?;
        let mut ids = source.to_vec();
        ids.push(EOS);
        ids.resize(limit, PAD);
        Ok(ids)
    }

    /// Teacher-forced decoder input `[bos, y…]` padded to `L_output`, and the
    /// prediction targets `[y…, eos]`.
    pub fn decoder_io(&self, target: &[u32]) -> Result<(Vec<u32>, Vec<u32>)> {
        let limit = self.config.target_positions;
        if target.is_empty() {
            return Err(Error::InvalidInput("target must be non-empty".into()));
        }
        if target.len() + 1 > limit {
            return Err(Error::Shape(format!(
                "target of {} tokens exceeds L_output = {limit} (including end-of-sequence)",
                target.len()
            )));
        }
        self.check_tokens(target)?;
        let mut input = Vec::with_capacity(limit);
        input.push(BOS);
        input.extend_from_slice(target);
        input.resize(limit, PAD);
        let mut targets = target.to_vec();
        targets.push(EOS);
        Ok((input, targets))
    }

    /// Full teacher-forced forward pass for one example.
    pub fn forward(&self, example: &Example) -> Result<SampleForward> {
        let source_ids = self.padded_source(&example.source)?;
        let (decoder_input, targets) = self.decoder_io(&example.target)?;
        let (enc_out, encoder) = self.encode(&source_ids);
        let (dec_out, decoder) = self.decode(&decoder_input, &enc_out, &encoder.mask);

        let steps = targets.len();
        let states = leading_rows(&dec_out, steps);
        let mut log_probs = Vec::with_capacity(self.config.experts);
        let mut ce = Vec::with_capacity(self.config.experts);
        for head in &self.params.heads {
            let lp = log_softmax_rows(&head.forward(&states.view()));
            let nll: f64 = targets.iter().enumerate().map(|(t, &y)| -lp[[t, y as usize]]).sum();
            ce.push(nll);
            log_probs.push(lp);
        }

        let pooled = pool(&enc_out, &dec_out, &self.params.pooler)?;
        let logits = LogitVector::new((pooled.dot(&self.params.pooler.w) + &self.params.pooler.b).to_vec())?;
        let projection = sparsegen_lin(&logits, self.config.lambda)?;

        Ok(SampleForward {
            encoder,
            decoder,
            enc_out,
            dec_out,
            targets,
            log_probs,
            ce,
            pooled,
            logits,
            projection,
        })
    }

    /// Backpropagates `∂L/∂CE` and `∂L/∂z` for one example into a fresh
    /// gradient container.
    pub fn backward(&self, fwd: &SampleForward, dce: &[f64], dz: &[f64]) -> ModelParams {
        let params = &self.params;
        let mut grad = params.zeros_like();
        let d = self.config.d_model;
        let steps = fwd.targets.len();

        // Pooler.
        let dz = Array1::from_vec(dz.to_vec());
        let pooled_len = fwd.pooled.len();
        for i in 0..pooled_len {
            for k in 0..dz.len() {
                grad.pooler.w[[i, k]] += fwd.pooled[i] * dz[k];
            }
        }
        grad.pooler.b += &dz;
        let dpooled = params.pooler.w.dot(&dz);
        let (denc_pool, ddec_pool) = (dpooled.slice(s![..d]), dpooled.slice(s![d..]));
        grad.pooler.w_enc += &fwd.enc_out.dot(&denc_pool);
        grad.pooler.w_dec += &fwd.dec_out.dot(&ddec_pool);
        let mut d_enc = outer(&params.pooler.w_enc, &denc_pool.to_owned());
        let mut d_dec = outer(&params.pooler.w_dec, &ddec_pool.to_owned());

        // Heads.
        let states = leading_rows(&fwd.dec_out, steps);
        for (k, head) in params.heads.iter().enumerate() {
            if dce[k] == 0.0 {
                continue;
            }
            let mut dlogits = fwd.log_probs[k].mapv(f64::exp);
            for (t, &y) in fwd.targets.iter().enumerate() {
                dlogits[[t, y as usize]] -= 1.0;
            }
            dlogits *= dce[k];
            let dstates = head.backward(&states.view(), &dlogits, &mut grad.heads[k]);
            d_dec.slice_mut(s![..steps, ..]).scaled_add(1.0, &dstates);
        }

        // Decoder.
        let mut dh = params.decoder_norm.backward(&fwd.decoder.norm, &d_dec, &mut grad.decoder_norm);
        for (i, layer) in params.decoder.iter().enumerate().rev() {
            let (dx, dmem) = layer.backward(&fwd.enc_out, &fwd.decoder.layers[i], &dh, &mut grad.decoder[i]);
            d_enc += &dmem;
            dh = dx;
        }
        scatter_rows(&mut grad.embed, &fwd.decoder.ids, &dh);

        // Encoder.
        let mut dh = params.encoder_norm.backward(&fwd.encoder.norm, &d_enc, &mut grad.encoder_norm);
        for (i, layer) in params.encoder.iter().enumerate().rev() {
            dh = layer.backward(&fwd.encoder.layers[i], &dh, &mut grad.encoder[i]);
        }
        scatter_rows(&mut grad.embed, &fwd.encoder.ids, &dh);
        grad
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &x) in a.iter().enumerate() {
        out.row_mut(i).scaled_add(x, b);
    }
    out
}

fn scatter_rows(target: &mut Array2<f64>, ids: &[u32], rows: &Array2<f64>) {
    for (&id, row) in ids.iter().zip(rows.rows()) {
        target.row_mut(id as usize).scaled_add(1.0, &row);
    }
}

/// `[E_encᵀ·w_enc ; E_decᵀ·w_dec]`; missing trailing rows count as zeros.
pub(crate) fn pool(enc: &Array2<f64>, dec: &Array2<f64>, pooler: &PatternPooler) -> Result<Array1<f64>> {
    let d = pooler.d_model();
    for (name, states, limit) in [("encoder", enc, pooler.w_enc.len()), ("decoder", dec, pooler.w_dec.len())] {
        if states.ncols() != d {
            return Err(Error::Shape(format!(
                "{name} states have width {}, pooler expects {d}",
                states.ncols()
            )));
        }
        if states.nrows() > limit {
            return Err(Error::Shape(format!(
                "{name} states have {} positions, pooler accepts at most {limit}",
                states.nrows()
            )));
        }
    }
    let mut pooled = Array1::zeros(2 * d);
    pooled
        .slice_mut(s![..d])
        .assign(&enc.t().dot(&pooler.w_enc.slice(s![..enc.nrows()])));
    pooled
        .slice_mut(s![d..])
        .assign(&dec.t().dot(&pooler.w_dec.slice(s![..dec.nrows()])));
    Ok(pooled)
}

pub(crate) struct EncoderTrace {
    ids: Vec<u32>,
    pub(crate) mask: Vec<bool>,
    layers: Vec<EncoderLayerCache>,
    norm: LayerNormCache,
}

pub(crate) struct DecoderTrace {
    ids: Vec<u32>,
    layers: Vec<DecoderLayerCache>,
    norm: LayerNormCache,
}

/// Activations of one teacher-forced forward pass.
pub struct SampleForward {
    encoder: EncoderTrace,
    decoder: DecoderTrace,
    pub enc_out: Array2<f64>,
    pub dec_out: Array2<f64>,
    pub targets: Vec<u32>,
    log_probs: Vec<Array2<f64>>,
    /// Token-summed negative log-likelihood under each head.
    pub ce: Vec<f64>,
    pub pooled: Array1<f64>,
    pub logits: LogitVector,
    pub projection: ProjectionSolution,
}
