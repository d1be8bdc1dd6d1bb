//! Encoder-decoder Transformer with multi-head attention and a direct
//! multi-step projection head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Freq, WindowSample};
use crate::embed::{positional_encoding, DataEmbedding, KgeParams, KgeReduce};
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;
use crate::numerics::{Padding, ParamId, ParamStore, Real, Session, Tensor, Var};
use crate::seed::derive_seed;

/// Additive logit applied to disallowed attention positions.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub lookback: usize,
    pub label_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub use_kge: bool,
    pub kge_reduce: KgeReduce,
    pub freq: Freq,
    pub kernel_width: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: D=64, 4 heads, d_ff=128, 2 encoder / 1 decoder layers.
    pub fn desk(lookback: usize, label_len: usize, horizon: usize, channels: usize, freq: Freq) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_v: 16,
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_ff: 128,
            dropout: 0.05,
            lookback,
            label_len,
            horizon,
            channels,
            use_kge: false,
            kge_reduce: KgeReduce::Sum,
            freq,
            kernel_width: 3,
            ln_eps: 1e-5,
        }
    }

    /// Full-protocol preset (D=512, 8 heads, d_ff=2048).
    pub fn full(lookback: usize, label_len: usize, horizon: usize, channels: usize, freq: Freq) -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            d_k: 64,
            d_v: 64,
            d_ff: 2048,
            ..Self::desk(lookback, label_len, horizon, channels, freq)
        }
    }

    /// Sets `d_model` and `n_heads`, re-deriving per-head sizes as `D / h`.
    pub fn with_dims(mut self, d_model: usize, n_heads: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        if let Some(per_head) = d_model.checked_div(n_heads) {
            self.d_k = per_head;
            self.d_v = per_head;
        }
        self
    }

    pub fn decoder_len(&self) -> usize {
        self.label_len + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.d_k == 0 || self.d_v == 0 || self.d_ff == 0 {
            return bad("heads, per-head sizes and d_ff must be positive".into());
        }
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return bad("lookback, horizon and channels must be positive".into());
        }
        if self.label_len > self.lookback {
            return bad(format!("label_len {} exceeds lookback {}", self.label_len, self.lookback));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.kernel_width.is_multiple_of(2) {
            return bad(format!("kernel width must be odd, got {}", self.kernel_width));
        }
        if self.ln_eps <= 0.0 {
            return bad("layer-norm eps must be positive".into());
        }
        Ok(())
    }
}

/// Boolean attention pattern; `true` means the key may be attended to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            allowed: (0..n * n).map(|i| i % n <= i / n).collect(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            rows,
            cols,
            allowed: (0..rows * cols).map(|i| f(i / cols, i % cols)).collect(),
        }
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|q| (0..self.cols).all(|k| !self.allowed(q, k) || k <= q))
    }

    fn bias<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([self.rows, self.cols], |i| {
            if self.allowed[i] {
                T::zero()
            } else {
                T::of(MASKED_LOGIT)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionWeights {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub attn: AttentionWeights,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayer {
    pub self_attn: AttentionWeights,
    pub norm1: Norm,
    pub cross_attn: AttentionWeights,
    pub norm2: Norm,
    pub ffn: FeedForward,
    pub norm3: Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    enc_embed: DataEmbedding,
    dec_embed: DataEmbedding,
    w_l: Option<ParamId>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Per-pass behavior: dropout is active only with an RNG present.
pub struct Pass<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Pass<'r> {
    pub fn eval() -> Pass<'static> {
        Pass { rng: None }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Pass { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }
}

/// Model parameters plus the fixed graph the knowledge-graph embedding reads.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    adjacency: Option<AdjacencyMatrix>,
    layout: Layout,
    pe_enc: Tensor<T>,
    pe_dec: Tensor<T>,
    causal: AttentionMask,
}

fn init_attention<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> AttentionWeights {
    let (d, hk, hv) = (cfg.d_model, cfg.n_heads * cfg.d_k, cfg.n_heads * cfg.d_v);
    AttentionWeights {
        w_q: store.add_uniform(format!("{prefix}.w_q"), &[d, hk], d, rng),
        w_k: store.add_uniform(format!("{prefix}.w_k"), &[d, hk], d, rng),
        w_v: store.add_uniform(format!("{prefix}.w_v"), &[d, hv], d, rng),
        w_o: store.add_uniform(format!("{prefix}.w_o"), &[hv, d], hv, rng),
    }
}

fn init_ffn<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> FeedForward {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    FeedForward {
        w1: store.add_uniform(format!("{prefix}.w1"), &[d, f], d, rng),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros([f])),
        w2: store.add_uniform(format!("{prefix}.w2"), &[f, d], f, rng),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros([d])),
    }
}

fn init_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Norm {
    Norm {
        gain: store.add(format!("{prefix}.gain"), Tensor::full([d], T::one())),
        bias: store.add(format!("{prefix}.bias"), Tensor::zeros([d])),
    }
}

fn init_embedding<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    seq_len: usize,
    padding: Padding,
    rng: &mut ChaCha8Rng,
) -> DataEmbedding {
    let (w, m, d) = (cfg.kernel_width, cfg.channels, cfg.d_model);
    let value_kernel = store.add_uniform(format!("{prefix}.value"), &[w, m, d], w * m, rng);
    let names = ["month", "day", "weekday", "hour", "minute"];
    let temporal_tables = cfg
        .freq
        .mark_cardinalities()
        .into_iter()
        .zip(names)
        .map(|(n, name)| store.add_uniform(format!("{prefix}.temporal.{name}"), &[n, d], n, rng))
        .collect();
    DataEmbedding {
        seq_len,
        value_kernel,
        temporal_tables,
        kge: None,
        padding,
    }
}

impl<T: Real> Transformer<T> {
    /// Initializes every weight from `uniform(±1/sqrt(fan_in))`.
    ///
    /// Non-graph parameters come from one seed stream and graph parameters
    /// from another, so two models differing only in `use_kge` share all
    /// common weights.
    pub fn new(config: ModelConfig, adjacency: Option<AdjacencyMatrix>, seed: u64) -> Result<Self> {
        config.validate()?;
        match (&adjacency, config.use_kge) {
            (None, true) => return Err(Error::Config("use_kge requires an adjacency matrix".into())),
            (Some(a), _) if a.size() != config.channels => {
                return Err(Error::Config(format!(
                    "adjacency has {} nodes but the model has {} channels",
                    a.size(),
                    config.channels
                )))
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let mut kge_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init.kge"));
        let mut store = ParamStore::new();
        let cfg = &config;

        let mut enc_embed = init_embedding(&mut store, "enc.embed", cfg, cfg.lookback, Padding::Circular, &mut rng);
        let mut dec_embed = init_embedding(&mut store, "dec.embed", cfg, cfg.decoder_len(), Padding::Causal, &mut rng);
        let encoder = (0..cfg.n_enc_layers)
            .map(|i| {
                let p = format!("enc.{i}");
                EncoderLayer {
                    attn: init_attention(&mut store, &format!("{p}.attn"), cfg, &mut rng),
                    norm1: init_norm(&mut store, &format!("{p}.norm1"), cfg.d_model),
                    ffn: init_ffn(&mut store, &format!("{p}.ffn"), cfg, &mut rng),
                    norm2: init_norm(&mut store, &format!("{p}.norm2"), cfg.d_model),
                }
            })
            .collect();
        let decoder = (0..cfg.n_dec_layers)
            .map(|i| {
                let p = format!("dec.{i}");
                DecoderLayer {
                    self_attn: init_attention(&mut store, &format!("{p}.self_attn"), cfg, &mut rng),
                    norm1: init_norm(&mut store, &format!("{p}.norm1"), cfg.d_model),
                    cross_attn: init_attention(&mut store, &format!("{p}.cross_attn"), cfg, &mut rng),
                    norm2: init_norm(&mut store, &format!("{p}.norm2"), cfg.d_model),
                    ffn: init_ffn(&mut store, &format!("{p}.ffn"), cfg, &mut rng),
                    norm3: init_norm(&mut store, &format!("{p}.norm3"), cfg.d_model),
                }
            })
            .collect();
        let head_w = store.add_uniform("head.w", &[cfg.d_model, cfg.channels], cfg.d_model, &mut rng);
        let head_b = store.add("head.b", Tensor::zeros([cfg.channels]));

        let mut w_l = None;
        if cfg.use_kge {
            let v = cfg.channels;
            let d = cfg.d_model;
            let wl = store.add_uniform("kge.w_l", &[v, d], v, &mut kge_rng);
            let wp_enc = store.add_uniform("enc.embed.kge_w_p", &[cfg.lookback, d], cfg.lookback, &mut kge_rng);
            let wp_dec = store.add_uniform("dec.embed.kge_w_p", &[cfg.decoder_len(), d], cfg.decoder_len(), &mut kge_rng);
            enc_embed.kge = Some(KgeParams {
                w_l: wl,
                w_p: wp_enc,
                reduce: cfg.kge_reduce,
            });
            dec_embed.kge = Some(KgeParams {
                w_l: wl,
                w_p: wp_dec,
                reduce: cfg.kge_reduce,
            });
            w_l = Some(wl);
        }

        Ok(Self {
            pe_enc: positional_encoding(cfg.lookback, cfg.d_model)?,
            pe_dec: positional_encoding(cfg.decoder_len(), cfg.d_model)?,
            causal: AttentionMask::causal(cfg.decoder_len()),
            adjacency,
            layout: Layout {
                enc_embed,
                dec_embed,
                w_l,
                encoder,
                decoder,
                head_w,
                head_b,
            },
            config,
            params: store,
        })
    }

    pub fn adjacency(&self) -> Option<&AdjacencyMatrix> {
        self.adjacency.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Scalars contributed by the knowledge-graph embedding (`W_l` and both `W_p`).
    pub fn kge_param_count(&self) -> usize {
        let c = &self.config;
        if c.use_kge {
            c.channels * c.d_model + (c.lookback + c.decoder_len()) * c.d_model
        } else {
            0
        }
    }

    pub fn w_l(&self) -> Option<ParamId> {
        self.layout.w_l
    }

    pub fn kge_params(&self) -> Vec<ParamId> {
        [self.layout.enc_embed.kge, self.layout.dec_embed.kge]
            .into_iter()
            .flatten()
            .flat_map(|k| [k.w_l, k.w_p])
            .fold(Vec::new(), |mut acc, id| {
                if !acc.contains(&id) {
                    acc.push(id);
                }
                acc
            })
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.layout.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.layout.decoder
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.layout.head_w, self.layout.head_b)
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_from(&mut self, other: &Transformer<T>) {
        for id in self.params.ids().collect::<Vec<_>>() {
            if let Some(src) = other.params.find(self.params.name(id)) {
                let value = other.params.get(src).clone();
                if value.shape() == self.params.get(id).shape() {
                    *self.params.get_mut(id) = value;
                }
            }
        }
    }

    fn adjacency_var(&self, sess: &mut Session<'_, T>) -> Option<Var> {
        if !self.config.use_kge {
            return None;
        }
        self.adjacency.as_ref().map(|a| sess.tape.constant(a.to_tensor()))
    }

    pub fn embed_encoder(&self, sess: &mut Session<'_, T>, x: &Tensor<T>, marks: &[Vec<usize>]) -> Result<Var> {
        let a = self.adjacency_var(sess);
        self.layout.enc_embed.compose(sess, x, marks, &self.pe_enc, a)
    }

    pub fn embed_decoder(&self, sess: &mut Session<'_, T>, x: &Tensor<T>, marks: &[Vec<usize>]) -> Result<Var> {
        let a = self.adjacency_var(sess);
        self.layout.dec_embed.compose(sess, x, marks, &self.pe_dec, a)
    }

    fn dropout(&self, sess: &mut Session<'_, T>, x: Var, pass: &mut Pass<'_>) -> Result<Var> {
        match pass.rng.as_deref_mut() {
            Some(rng) if self.config.dropout > 0.0 => sess.tape.dropout(x, self.config.dropout, rng),
            _ => Ok(x),
        }
    }

    fn norm(&self, sess: &mut Session<'_, T>, x: Var, n: &Norm) -> Result<Var> {
        let (g, b) = (sess.param(n.gain), sess.param(n.bias));
        sess.tape.layer_norm(x, g, b, self.config.ln_eps)
    }

    fn feed_forward(&self, sess: &mut Session<'_, T>, x: Var, f: &FeedForward, pass: &mut Pass<'_>) -> Result<Var> {
        let (w1, b1, w2, b2) = (sess.param(f.w1), sess.param(f.b1), sess.param(f.w2), sess.param(f.b2));
        let h = sess.tape.matmul(x, w1)?;
        let h = sess.tape.add(h, b1)?;
        let h = sess.tape.relu(h);
        let h = self.dropout(sess, h, pass)?;
        let o = sess.tape.matmul(h, w2)?;
        sess.tape.add(o, b2)
    }

    fn residual_norm(&self, sess: &mut Session<'_, T>, x: Var, sub: Var, n: &Norm, pass: &mut Pass<'_>) -> Result<Var> {
        let sub = self.dropout(sess, sub, pass)?;
        let sum = sess.tape.add(x, sub)?;
        self.norm(sess, sum, n)
    }

    /// Multi-head attention with this model's head sizes.
    pub fn attention(
        &self,
        sess: &mut Session<'_, T>,
        z_q: Var,
        z_kv: Var,
        w: &AttentionWeights,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        multi_head(sess, z_q, z_kv, w, self.config.n_heads, mask)
    }

    /// `[L, D]` embedding to `[L, D]` memory.
    pub fn encoder_forward(&self, sess: &mut Session<'_, T>, z_enc: Var, pass: &mut Pass<'_>) -> Result<Var> {
        let mut x = z_enc;
        for layer in &self.layout.encoder {
            let a = self.attention(sess, x, x, &layer.attn, None)?;
            x = self.residual_norm(sess, x, a, &layer.norm1, pass)?;
            let f = self.feed_forward(sess, x, &layer.ffn, pass)?;
            x = self.residual_norm(sess, x, f, &layer.norm2, pass)?;
        }
        Ok(x)
    }

    /// `[label_len + H, D]` decoder embedding plus memory to `[label_len + H, D]`.
    pub fn decoder_forward(&self, sess: &mut Session<'_, T>, z_dec: Var, memory: Var, pass: &mut Pass<'_>) -> Result<Var> {
        let mut x = z_dec;
        for layer in &self.layout.decoder {
            let a = self.attention(sess, x, x, &layer.self_attn, Some(&self.causal))?;
            x = self.residual_norm(sess, x, a, &layer.norm1, pass)?;
            let c = self.attention(sess, x, memory, &layer.cross_attn, None)?;
            x = self.residual_norm(sess, x, c, &layer.norm2, pass)?;
            let f = self.feed_forward(sess, x, &layer.ffn, pass)?;
            x = self.residual_norm(sess, x, f, &layer.norm3, pass)?;
        }
        Ok(x)
    }

    /// Emits all `H` horizon steps in one pass as a `[H, M]` variable.
    pub fn forecast_var(&self, sess: &mut Session<'_, T>, sample: &WindowSample<T>, pass: &mut Pass<'_>) -> Result<Var> {
        let c = &self.config;
        let expect_dec = [c.decoder_len(), c.channels];
        if sample.x_enc.shape() != [c.lookback, c.channels] {
            return Err(Error::shape("forecast", sample.x_enc.shape(), &[c.lookback, c.channels]));
        }
        if sample.x_dec.shape() != expect_dec {
            return Err(Error::shape("forecast", sample.x_dec.shape(), &expect_dec));
        }
        let z_enc = self.embed_encoder(sess, &sample.x_enc, &sample.marks_enc)?;
        let z_enc = self.dropout(sess, z_enc, pass)?;
        let memory = self.encoder_forward(sess, z_enc, pass)?;
        let z_dec = self.embed_decoder(sess, &sample.x_dec, &sample.marks_dec)?;
        let z_dec = self.dropout(sess, z_dec, pass)?;
        let out = self.decoder_forward(sess, z_dec, memory, pass)?;
        let (hw, hb) = (sess.param(self.layout.head_w), sess.param(self.layout.head_b));
        let proj = sess.tape.matmul(out, hw)?;
        let proj = sess.tape.add(proj, hb)?;
        sess.tape.slice_rows(proj, c.label_len, c.horizon)
    }

    /// Eval-mode forecast.
    pub fn forecast(&self, sample: &WindowSample<T>) -> Result<Tensor<T>> {
        let mut sess = Session::new(&self.params);
        let v = self.forecast_var(&mut sess, sample, &mut Pass::eval())?;
        Ok(sess.tape.value(v).clone())
    }

    pub fn forecast_batch(&self, samples: &[WindowSample<T>]) -> Result<Vec<Tensor<T>>> {
        samples.iter().map(|s| self.forecast(s)).collect()
    }
}

/// `Q = Z W_Q`, `K = Z W_K`, `V = Z W_V`, each split into `heads` column blocks.
pub fn project_qkv<T: Real>(
    sess: &mut Session<'_, T>,
    z_q: Var,
    z_kv: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
    let (wq, wk, wv) = (sess.param(w.w_q), sess.param(w.w_k), sess.param(w.w_v));
    let q = sess.tape.matmul(z_q, wq)?;
    let k = sess.tape.matmul(z_kv, wk)?;
    let v = sess.tape.matmul(z_kv, wv)?;
    Ok((
        split_heads(sess, q, heads)?,
        split_heads(sess, k, heads)?,
        split_heads(sess, v, heads)?,
    ))
}

fn split_heads<T: Real>(sess: &mut Session<'_, T>, x: Var, heads: usize) -> Result<Vec<Var>> {
    let width = sess.tape.shape(x)[1];
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::shape("split_heads", sess.tape.shape(x), &[heads]));
    }
    let d = width / heads;
    if heads == 1 {
        return Ok(vec![x]);
    }
    (0..heads).map(|h| sess.tape.slice_last(x, h * d, d)).collect()
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` for one head.
pub fn scaled_dot_attention<T: Real>(
    sess: &mut Session<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let d_k = sess.tape.shape(q)[1];
    let (tq, tk) = (sess.tape.shape(q)[0], sess.tape.shape(k)[0]);
    let scores = sess.tape.matmul_t(q, k)?;
    let mut scores = sess.tape.scale(scores, T::one() / T::of(d_k as f64).sqrt());
    if let Some(m) = mask {
        if (m.rows, m.cols) != (tq, tk) {
            return Err(Error::shape("attention mask", &[m.rows, m.cols], &[tq, tk]));
        }
        if let Some(q_row) = (0..tq).find(|&r| (0..tk).all(|c| !m.allowed(r, c))) {
            return Err(Error::Contract(format!("query row {q_row} has every key masked")));
        }
        let bias = sess.tape.constant(m.bias());
        scores = sess.tape.add(scores, bias)?;
    }
    let p = sess.tape.softmax_rows(scores)?;
    sess.tape.matmul(p, v)
}

/// `Concat(head_1, …, head_h) W_O`.
pub fn multi_head<T: Real>(
    sess: &mut Session<'_, T>,
    z_q: Var,
    z_kv: Var,
    w: &AttentionWeights,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let (qs, ks, vs) = project_qkv(sess, z_q, z_kv, w, heads)?;
    let outs = qs
        .into_iter()
        .zip(ks)
        .zip(vs)
        .map(|((q, k), v)| scaled_dot_attention(sess, q, k, v, mask))
        .collect::<Result<Vec<_>>>()?;
    let cat = if outs.len() == 1 { outs[0] } else { sess.tape.concat_last(&outs)? };
    let wo = sess.param(w.w_o);
    sess.tape.matmul(cat, wo)
}
