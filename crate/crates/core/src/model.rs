//! Attention encoder-decoder with `K` multi-token prediction heads.
//!
//! The encoder and decoder are pre-norm transformer stacks with sinusoidal
//! positions. Head `k` maps the decoder state through its own residual
//! feed-forward block and then through the single shared output projection.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use mtpbias_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, BOS};

const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub ffn_expansion: usize,
    /// Number of future-token heads `K`.
    pub mtp_heads: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub scorer_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            ffn_expansion: 4,
            mtp_heads: 4,
            vocab_size: 64,
            feature_dim: 16,
            scorer_hidden: 16,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.d_model > 0, "model.d_model must be positive"),
            (self.attention_heads > 0, "model.attention_heads must be positive"),
            (
                self.attention_heads > 0 && self.d_model % self.attention_heads == 0,
                "model.d_model must be divisible by model.attention_heads",
            ),
            (self.ffn_expansion > 0, "model.ffn_expansion must be positive"),
            (self.mtp_heads > 0, "model.mtp_heads must be at least 1"),
            (self.vocab_size > 3, "model.vocab_size must exceed the reserved ids"),
            (self.feature_dim > 0, "model.feature_dim must be positive"),
            (self.scorer_hidden > 0, "model.scorer_hidden must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    fn add(&mut self, name: String, tensor: Tensor<R>) -> ParamId {
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a borrowed leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, R>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameter handles on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

/// Parameter ids of the learned entity scorer `K -> hidden -> 1`.
#[derive(Clone, Copy, Debug)]
pub struct ScorerParams {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    embedding: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    heads: Vec<FeedForward>,
    output: ParamId,
    scorer: ScorerParams,
}

/// Encoder output `H_e`, `[T × d]`.
#[derive(Clone, Debug)]
pub struct EncoderStates<R: Real = f32> {
    pub states: Tensor<R>,
}

impl<R: Real> EncoderStates<R> {
    pub fn frames(&self) -> usize {
        self.states.shape()[0]
    }
}

/// Future-token logits of one decoding step, `[K × V]`; row `k` comes from
/// head `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MtpLogits<R: Real = f32> {
    heads: usize,
    vocab: usize,
    data: Vec<R>,
}

impl<R: Real> MtpLogits<R> {
    pub fn new(heads: usize, vocab: usize, data: Vec<R>) -> Result<Self> {
        if heads * vocab != data.len() || heads == 0 {
            return Err(Error::Validation(format!(
                "MTP logits: {} values for {heads}×{vocab}",
                data.len()
            )));
        }
        Ok(Self { heads, vocab, data })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, k: usize) -> &[R] {
        &self.data[k * self.vocab..(k + 1) * self.vocab]
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so each tensor's init is independent of registration order
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Builder<R: Real> {
    seed: u64,
    store: ParamStore<R>,
}

impl<R: Real> Builder<R> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(name_seed(self.seed, &name));
        let bound = 1.0 / (rows as f64).sqrt();
        let t = Tensor::uniform(vec![rows, cols], bound, &mut rng);
        self.store.add(name, t)
    }

    fn bias(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(vec![n]))
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), rows, cols),
            b: self.bias(format!("{name}.b"), cols),
        }
    }

    fn norm(&mut self, name: &str, n: usize) -> Norm {
        let ones = Tensor::new(vec![n], vec![R::one(); n]).expect("shape");
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), ones),
            beta: self.bias(format!("{name}.beta"), n),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

/// Sinusoidal position codes for positions `start..start + len`.
pub fn positions<R: Real>(start: usize, len: usize, d: usize) -> Vec<R> {
    let mut out = vec![R::zero(); len * d];
    for p in 0..len {
        let pos = (start + p) as f64;
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64) * (10000f64).ln() / d as f64).exp();
            out[p * d + 2 * i] = R::lit((pos * freq).sin());
            out[p * d + 2 * i + 1] = R::lit((pos * freq).cos());
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Model<R: Real = f32> {
    config: ModelConfig,
    params: ParamStore<R>,
    layout: Layout,
}

impl<R: Real> Model<R> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = d * config.ffn_expansion;
        let mut b = Builder {
            seed: config.init_seed,
            store: ParamStore::default(),
        };
        let input = b.linear("enc.input", config.feature_dim, d);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer {
                norm_attn: b.norm(&format!("enc.{i}.norm_attn"), d),
                attn: b.attention(&format!("enc.{i}.attn"), d),
                norm_ff: b.norm(&format!("enc.{i}.norm_ff"), d),
                ff: b.feed_forward(&format!("enc.{i}.ff"), d, hidden),
            })
            .collect();
        let encoder_norm = b.norm("enc.norm", d);
        let embedding = b.weight("dec.embedding".into(), config.vocab_size, d);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer {
                norm_self: b.norm(&format!("dec.{i}.norm_self"), d),
                self_attn: b.attention(&format!("dec.{i}.self"), d),
                norm_cross: b.norm(&format!("dec.{i}.norm_cross"), d),
                cross_attn: b.attention(&format!("dec.{i}.cross"), d),
                norm_ff: b.norm(&format!("dec.{i}.norm_ff"), d),
                ff: b.feed_forward(&format!("dec.{i}.ff"), d, hidden),
            })
            .collect();
        let decoder_norm = b.norm("dec.norm", d);
        let heads = (0..config.mtp_heads)
            .map(|k| b.feed_forward(&format!("head.{k}"), d, d))
            .collect();
        let output = b.weight("output.w".into(), d, config.vocab_size);
        let scorer = ScorerParams {
            hidden_w: b.weight("scorer.hidden.w".into(), config.mtp_heads, config.scorer_hidden),
            hidden_b: b.bias("scorer.hidden.b".into(), config.scorer_hidden),
            out_w: b.weight("scorer.out.w".into(), config.scorer_hidden, 1),
            out_b: b.bias("scorer.out.b".into(), 1),
        };
        Ok(Self {
            config,
            params: b.store,
            layout: Layout {
                input,
                encoder,
                encoder_norm,
                embedding,
                decoder,
                decoder_norm,
                heads,
                output,
                scorer,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn scorer_params(&self) -> ScorerParams {
        self.layout.scorer
    }

    /// Names of the parameters belonging to the learned entity scorer.
    pub fn scorer_param_names(&self) -> [&str; 4] {
        let s = self.layout.scorer;
        let n = |id: ParamId| self.params.names[id.0].as_str();
        [n(s.hidden_w), n(s.hidden_b), n(s.out_w), n(s.out_b)]
    }

    /// Same architecture and values in another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(Tensor::cast).collect(),
            },
            layout: self.layout.clone(),
        }
    }

    /// Replaces parameter values by name. Every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<R>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let idx = self
                .params
                .index_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let slot = &mut self.params.tensors[idx];
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    fn linear<'a>(&self, tape: &mut Tape<'a, R>, b: &Bound, l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(l.w))?;
        Ok(tape.add(y, b.var(l.b))?)
    }

    fn norm<'a>(&self, tape: &mut Tape<'a, R>, b: &Bound, n: Norm, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, b.var(n.gamma), b.var(n.beta))?)
    }

    fn feed_forward<'a>(&self, tape: &mut Tape<'a, R>, b: &Bound, f: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(tape, b, f.up, x)?;
        let h = tape.gelu(h);
        self.linear(tape, b, f.down, h)
    }

    /// Multi-head scaled dot-product attention of `q [Sq×d]` over
    /// `k, v [Sk×d]`, with an optional additive mask `[Sq×Sk]`.
    fn attend<'a>(&self, tape: &mut Tape<'a, R>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let heads = self.config.attention_heads;
        let dh = self.config.d_model / heads;
        let scale = R::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let weights = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        Ok(tape.concat(&outs, 1)?)
    }

    /// `H_e = AudioEnc(X)` on the tape. `features` is `[T × feature_dim]`.
    pub fn encode_on<'a>(&self, tape: &mut Tape<'a, R>, b: &Bound, features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Validation(format!("encoder input must be non-empty [T×F], got {shape:?}")));
        }
        if shape[1] != self.config.feature_dim {
            return Err(Error::Validation(format!(
                "feature width {} does not match model.feature_dim {}",
                shape[1], self.config.feature_dim
            )));
        }
        let (frames, d) = (shape[0], self.config.d_model);
        let x = self.linear(tape, b, self.layout.input, features)?;
        let pos = tape.constant(vec![frames, d], positions(0, frames, d))?;
        let mut x = tape.add(x, pos)?;
        for layer in &self.layout.encoder {
            let a = self.norm(tape, b, layer.norm_attn, x)?;
            let q = self.linear(tape, b, layer.attn.q, a)?;
            let k = self.linear(tape, b, layer.attn.k, a)?;
            let v = self.linear(tape, b, layer.attn.v, a)?;
            let att = self.attend(tape, q, k, v, None)?;
            let att = self.linear(tape, b, layer.attn.o, att)?;
            x = tape.add(x, att)?;
            let f = self.norm(tape, b, layer.norm_ff, x)?;
            let f = self.feed_forward(tape, b, layer.ff, f)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, b, self.layout.encoder_norm, x)
    }

    /// Encodes a feature matrix outside of any training graph.
    pub fn encode(&self, features: &Tensor<R>) -> Result<EncoderStates<R>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let x = tape.leaf(features);
        let h = self.encode_on(&mut tape, &b, x)?;
        Ok(EncoderStates {
            states: tape.to_tensor(h),
        })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced decoder states `h^d_s` for every prefix of `inputs`
    /// (which starts with BOS), `[S × d]`, under a causal mask.
    pub fn decode_on<'a>(&self, tape: &mut Tape<'a, R>, b: &Bound, inputs: &[TokenId], enc: Var) -> Result<Var> {
        if inputs.first() != Some(&BOS) {
            return Err(Error::Validation("decoder input must start with BOS".into()));
        }
        self.check_tokens(inputs)?;
        let (steps, d) = (inputs.len(), self.config.d_model);
        let emb = tape.embedding(b.var(self.layout.embedding), inputs)?;
        let pos = tape.constant(vec![steps, d], positions(0, steps, d))?;
        let mut x = tape.add(emb, pos)?;
        let mut mask = vec![R::zero(); steps * steps];
        for i in 0..steps {
            for j in i + 1..steps {
                mask[i * steps + j] = R::lit(MASKED);
            }
        }
        let mask = tape.constant(vec![steps, steps], mask)?;
        for layer in &self.layout.decoder {
            let a = self.norm(tape, b, layer.norm_self, x)?;
            let q = self.linear(tape, b, layer.self_attn.q, a)?;
            let k = self.linear(tape, b, layer.self_attn.k, a)?;
            let v = self.linear(tape, b, layer.self_attn.v, a)?;
            let att = self.attend(tape, q, k, v, Some(mask))?;
            let att = self.linear(tape, b, layer.self_attn.o, att)?;
            x = tape.add(x, att)?;
            let a = self.norm(tape, b, layer.norm_cross, x)?;
            let q = self.linear(tape, b, layer.cross_attn.q, a)?;
            let k = self.linear(tape, b, layer.cross_attn.k, enc)?;
            let v = self.linear(tape, b, layer.cross_attn.v, enc)?;
            let att = self.attend(tape, q, k, v, None)?;
            let att = self.linear(tape, b, layer.cross_attn.o, att)?;
            x = tape.add(x, att)?;
            let f = self.norm(tape, b, layer.norm_ff, x)?;
            let f = self.feed_forward(tape, b, layer.ff, f)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, b, self.layout.decoder_norm, x)
    }

    /// Logits of head `k` (0-based) for decoder states `h [S×d]`:
    /// `(h + FFN_k(h)) · W_o`, `[S × V]`.
    pub fn head_logits_on<'a>(&self, tape: &mut Tape<'a, R>, b: &Bound, h: Var, k: usize) -> Result<Var> {
        let head = *self
            .layout
            .heads
            .get(k)
            .ok_or_else(|| Error::Validation(format!("head {k} out of range")))?;
        let f = self.feed_forward(tape, b, head, h)?;
        let g = tape.add(h, f)?;
        Ok(tape.matmul(g, b.var(self.layout.output))?)
    }

    /// All `K` heads, each `[S × V]`.
    pub fn mtp_logits_on<'a>(&self, tape: &mut Tape<'a, R>, b: &Bound, h: Var) -> Result<Vec<Var>> {
        (0..self.config.mtp_heads)
            .map(|k| self.head_logits_on(tape, b, h, k))
            .collect()
    }

    /// Logits of head `k` for a single decoder state.
    pub fn head_logits(&self, hidden: &[R], k: usize) -> Result<Vec<R>> {
        let d = self.config.d_model;
        if hidden.len() != d {
            return Err(Error::Validation(format!("decoder state has {} values, expected {d}", hidden.len())));
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let h = tape.borrowed(vec![1, d], hidden)?;
        let l = self.head_logits_on(&mut tape, &b, h, k)?;
        Ok(tape.value(l).to_vec())
    }

    /// `L_s` for a single decoder state.
    pub fn mtp_heads(&self, hidden: &[R]) -> Result<MtpLogits<R>> {
        let mut data = Vec::with_capacity(self.config.mtp_heads * self.config.vocab_size);
        for k in 0..self.config.mtp_heads {
            data.extend(self.head_logits(hidden, k)?);
        }
        MtpLogits::new(self.config.mtp_heads, self.config.vocab_size, data)
    }

    /// Full recomputation of `h^d_s` for the last position of `prefix`.
    pub fn decode_step(&self, prefix: &[TokenId], enc: &EncoderStates<R>) -> Result<Vec<R>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let e = tape.leaf(&enc.states);
        let h = self.decode_on(&mut tape, &b, prefix, e)?;
        let d = self.config.d_model;
        let all = tape.value(h);
        Ok(all[all.len() - d..].to_vec())
    }

    /// Starts an incremental decoder over `enc`.
    pub fn start_decoder(&self, enc: &EncoderStates<R>) -> Result<IncrementalDecoder<'_, R>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let e = tape.leaf(&enc.states);
        let mut cross = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let k = self.linear(&mut tape, &b, layer.cross_attn.k, e)?;
            let v = self.linear(&mut tape, &b, layer.cross_attn.v, e)?;
            cross.push((tape.value(k).to_vec(), tape.value(v).to_vec()));
        }
        Ok(IncrementalDecoder {
            model: self,
            frames: enc.frames(),
            cross,
            cache: vec![(Vec::new(), Vec::new()); self.layout.decoder.len()],
            consumed: Vec::new(),
        })
    }
}

/// Decoder with cached self-attention keys and values, advanced one token
/// at a time.
#[derive(Debug)]
pub struct IncrementalDecoder<'m, R: Real = f32> {
    model: &'m Model<R>,
    frames: usize,
    cross: Vec<(Vec<R>, Vec<R>)>,
    cache: Vec<(Vec<R>, Vec<R>)>,
    consumed: Vec<TokenId>,
}

impl<R: Real> IncrementalDecoder<'_, R> {
    pub fn consumed(&self) -> &[TokenId] {
        &self.consumed
    }

    /// Feeds `token` and returns `h^d` for the extended prefix.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<R>> {
        let model = self.model;
        if self.consumed.is_empty() && token != BOS {
            return Err(Error::Validation("decoder input must start with BOS".into()));
        }
        model.check_tokens(&[token])?;
        let d = model.config.d_model;
        let pos = self.consumed.len();
        let mut new_kv = Vec::with_capacity(self.cache.len());
        let hidden = {
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape);
            let emb = tape.embedding(b.var(model.layout.embedding), &[token])?;
            let p = tape.constant(vec![1, d], positions(pos, 1, d))?;
            let mut x = tape.add(emb, p)?;
            for (layer, ((ck, cv), (xk, xv))) in model
                .layout
                .decoder
                .iter()
                .zip(self.cache.iter().zip(&self.cross))
            {
                let a = model.norm(&mut tape, &b, layer.norm_self, x)?;
                let q = model.linear(&mut tape, &b, layer.self_attn.q, a)?;
                let k = model.linear(&mut tape, &b, layer.self_attn.k, a)?;
                let v = model.linear(&mut tape, &b, layer.self_attn.v, a)?;
                new_kv.push((tape.value(k).to_vec(), tape.value(v).to_vec()));
                let (keys, values) = if pos == 0 {
                    (k, v)
                } else {
                    let pk = tape.borrowed(vec![pos, d], ck)?;
                    let pv = tape.borrowed(vec![pos, d], cv)?;
                    (tape.concat(&[pk, k], 0)?, tape.concat(&[pv, v], 0)?)
                };
                let att = model.attend(&mut tape, q, keys, values, None)?;
                let att = model.linear(&mut tape, &b, layer.self_attn.o, att)?;
                x = tape.add(x, att)?;
                let a = model.norm(&mut tape, &b, layer.norm_cross, x)?;
                let q = model.linear(&mut tape, &b, layer.cross_attn.q, a)?;
                let ek = tape.borrowed(vec![self.frames, d], xk)?;
                let ev = tape.borrowed(vec![self.frames, d], xv)?;
                let att = model.attend(&mut tape, q, ek, ev, None)?;
                let att = model.linear(&mut tape, &b, layer.cross_attn.o, att)?;
                x = tape.add(x, att)?;
                let f = model.norm(&mut tape, &b, layer.norm_ff, x)?;
                let f = model.feed_forward(&mut tape, &b, layer.ff, f)?;
                x = tape.add(x, f)?;
            }
            let h = model.norm(&mut tape, &b, model.layout.decoder_norm, x)?;
            tape.value(h).to_vec()
        };
        for ((ck, cv), (k, v)) in self.cache.iter_mut().zip(new_kv) {
            ck.extend(k);
            cv.extend(v);
        }
        self.consumed.push(token);
        Ok(hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 2,
            attention_heads: 2,
            ffn_expansion: 2,
            mtp_heads: 3,
            vocab_size: 10,
            feature_dim: 4,
            scorer_hidden: 4,
            init_seed: 3,
        }
    }

    fn features(frames: usize, width: usize, offset: f32) -> Tensor {
        let data = (0..frames * width)
            .map(|i| ((i as f32 + offset) * 0.37).sin())
            .collect();
        Tensor::new(vec![frames, width], data).unwrap()
    }

    #[test]
    fn encode_shapes_and_errors() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let enc = m.encode(&features(1, 4, 0.0)).unwrap();
        assert_eq!(enc.states.shape(), &[1, 8]);
        assert!(m.encode(&Tensor::zeros(vec![0, 4])).is_err());
        assert!(m.encode(&features(3, 5, 0.0)).is_err());
    }

    #[test]
    fn encoder_sees_positions() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let x = features(4, 4, 0.0);
        let mut swapped = x.clone();
        let (a, b) = (x.data()[..4].to_vec(), x.data()[4..8].to_vec());
        swapped.data_mut()[..4].copy_from_slice(&b);
        swapped.data_mut()[4..8].copy_from_slice(&a);
        let e1 = m.encode(&x).unwrap();
        let e2 = m.encode(&swapped).unwrap();
        // without positions, rows 0/1 would simply swap
        assert_ne!(&e1.states.data()[..8], &e2.states.data()[8..16]);
        assert_eq!(m.encode(&x).unwrap().states, e1.states);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            d_model: 10,
            attention_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            mtp_heads: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_independent_of_head_count() {
        let a = Model::<f32>::new(tiny()).unwrap();
        let b = Model::<f32>::new(ModelConfig {
            mtp_heads: 1,
            ..tiny()
        })
        .unwrap();
        let w = |m: &Model<f32>, n: &str| m.params().tensors()[m.params().index_of(n).unwrap()].clone();
        assert_eq!(w(&a, "dec.0.self.q.w"), w(&b, "dec.0.self.q.w"));
        assert_eq!(w(&a, "head.0.up.w"), w(&b, "head.0.up.w"));
        assert_eq!(w(&a, "output.w"), w(&b, "output.w"));
    }

    #[test]
    fn decoder_rejects_bad_tokens() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let enc = m.encode(&features(3, 4, 0.0)).unwrap();
        assert!(m.decode_step(&[BOS, 10], &enc).is_err());
        assert!(m.decode_step(&[3, 4], &enc).is_err());
        assert_eq!(m.decode_step(&[BOS], &enc).unwrap().len(), 8);
    }
}
