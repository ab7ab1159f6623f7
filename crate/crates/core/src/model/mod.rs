//! Encoder-decoder translator over frame features.
//!
//! Frames are embedded as `relu(BN(W x + b)) + pos(t)`, target words the same
//! way from a learned table. The encoder is a pre-norm stack
//! (`z = MHA(LN(x)) + x`, `x' = MLP(LN(z)) + z`) whose attention is selectable
//! between dense self-attention, gloss attention, and a sliding window. The
//! decoder is a standard pre-norm stack with causal self-attention and
//! dense cross-attention.

mod checkpoint;
mod config;
mod decode;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Aggregation, ModelConfig, VariantKind, MODEL_KEYS};
pub use decode::DecodeMode;
pub use params::{xavier, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head, AttentionError, AttentionVariant, AttentionMap, KeyMask, MultiHeadParams};
use crate::numerics::{BatchNormMode, Graph, NumericsError, RunningStats, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sinusoidal position code: `sin(pos / 10000^(2i/d))` in even dimensions,
/// the matching cosine in odd ones.
pub fn positional_encoding(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn positional_block(start: usize, len: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d_model);
    for p in start..start + len {
        data.extend(positional_encoding(p, d_model));
    }
    Tensor::matrix(len, d_model, data)
}

/// Pools `hidden` rows marked valid. For [`Aggregation::Cls`] row 0 is the
/// CLS slot.
pub fn sentence_embedding(
    hidden: &Tensor,
    mode: Aggregation,
    valid: &[bool],
) -> Result<Vec<f64>, ModelError> {
    if valid.len() != hidden.rows() {
        return Err(ModelError::Input("mask length differs from row count".into()));
    }
    let rows: Vec<usize> = (0..hidden.rows()).filter(|&r| valid[r]).collect();
    if rows.is_empty() {
        return Err(ModelError::Input("sentence embedding of an all-masked sequence".into()));
    }
    let d = hidden.cols();
    Ok(match mode {
        Aggregation::Mean => (0..d)
            .map(|c| rows.iter().map(|&r| hidden.at(r, c)).sum::<f64>() / rows.len() as f64)
            .collect(),
        Aggregation::Max => (0..d)
            .map(|c| rows.iter().map(|&r| hidden.at(r, c)).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        Aggregation::Cls => hidden.row(0).to_vec(),
    })
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct AttnIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_out: ParamId,
    offsets: Vec<ParamId>,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: AttnIds,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: AttnIds,
    ln2: Norm,
    cross_attn: AttnIds,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    video: Linear,
    video_bn: Norm,
    embedding: ParamId,
    text: Linear,
    text_bn: Norm,
    cls: Option<ParamId>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    final_ln: Norm,
    output: Linear,
}

/// Running statistics of the two embedding batch norms.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub video: RunningStats,
    pub text: RunningStats,
}

/// How new parameters are filled.
enum Init<'a> {
    Xavier(&'a mut ChaCha8Rng),
    Zeros,
}

struct Builder<'a> {
    store: ParamStore,
    init: Init<'a>,
}

impl Builder<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let t = match &mut self.init {
            Init::Xavier(rng) => xavier(*rng, rows, cols),
            Init::Zeros => Tensor::zeros(&[rows, cols]),
        };
        self.store.add(name, t)
    }

    fn filled(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.matrix(format!("{name}.weight"), fan_in, fan_out),
            b: self.filled(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.filled(format!("{name}.gain"), &[d], 1.0),
            bias: self.filled(format!("{name}.bias"), &[d], 0.0),
        }
    }

    fn attention(&mut self, name: &str, cfg: &ModelConfig, with_offsets: bool) -> AttnIds {
        let d = cfg.d_model;
        let w_q = self.matrix(format!("{name}.w_q"), d, d);
        let w_k = self.matrix(format!("{name}.w_k"), d, d);
        let w_v = self.matrix(format!("{name}.w_v"), d, d);
        let w_out = self.matrix(format!("{name}.w_out"), d, d);
        // offsets start at zero: every query begins on its local window
        let offsets = if with_offsets {
            (0..cfg.heads)
                .map(|h| {
                    self.filled(
                        format!("{name}.offset.{h}"),
                        &[cfg.gloss_positions, cfg.d_head()],
                        0.0,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        AttnIds {
            w_q,
            w_k,
            w_v,
            w_out,
            offsets,
        }
    }
}

fn build_layout(cfg: &ModelConfig, init: Init<'_>) -> (ParamStore, Layout) {
    let d = cfg.d_model;
    let mut b = Builder {
        store: ParamStore::default(),
        init,
    };
    let video = b.linear("video.proj", cfg.input_dim, d);
    let video_bn = b.norm("video.bn", d);
    let embedding = b.matrix("text.embedding".into(), cfg.vocab_size, d);
    let text = b.linear("text.proj", d, d);
    let text_bn = b.norm("text.bn", d);
    let cls = (cfg.aggregation == Aggregation::Cls).then(|| b.matrix("encoder.cls".into(), 1, d));
    let gloss = cfg.variant == VariantKind::Gloss;
    let encoder = (0..cfg.encoder_layers)
        .map(|i| EncoderLayer {
            ln1: b.norm(&format!("encoder.{i}.ln1"), d),
            attn: b.attention(&format!("encoder.{i}.attn"), cfg, gloss),
            ln2: b.norm(&format!("encoder.{i}.ln2"), d),
            ff1: b.linear(&format!("encoder.{i}.ff1"), d, cfg.ff_dim),
            ff2: b.linear(&format!("encoder.{i}.ff2"), cfg.ff_dim, d),
        })
        .collect();
    let decoder = (0..cfg.decoder_layers)
        .map(|i| DecoderLayer {
            ln1: b.norm(&format!("decoder.{i}.ln1"), d),
            self_attn: b.attention(&format!("decoder.{i}.self_attn"), cfg, false),
            ln2: b.norm(&format!("decoder.{i}.ln2"), d),
            cross_attn: b.attention(&format!("decoder.{i}.cross_attn"), cfg, false),
            ln3: b.norm(&format!("decoder.{i}.ln3"), d),
            ff1: b.linear(&format!("decoder.{i}.ff1"), d, cfg.ff_dim),
            ff2: b.linear(&format!("decoder.{i}.ff2"), cfg.ff_dim, d),
        })
        .collect();
    let final_ln = b.norm("decoder.final_ln", d);
    let output = b.linear("output", d, cfg.vocab_size);
    let layout = Layout {
        video,
        video_bn,
        embedding,
        text,
        text_bn,
        cls,
        encoder,
        decoder,
        final_ln,
        output,
    };
    (b.store, layout)
}

#[derive(Clone, Debug)]
pub struct Translator {
    config: ModelConfig,
    pub params: ParamStore,
    pub norms: NormStats,
    layout: Layout,
}

/// Encoder result as plain values.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `T x d_model`, one row per input frame (a CLS slot is not included).
    pub hidden: Tensor,
    pub maps: Vec<AttentionMap>,
    pub embedding: Vec<f64>,
}

/// Encoder result as graph nodes.
pub struct EncodedVars {
    pub hidden: Var,
    pub embedding: Var,
    pub valid: Vec<bool>,
    pub attention: Vec<crate::attention::MultiHeadOutput>,
    /// Key length of the encoder attention maps (includes a CLS slot).
    pub key_len: usize,
}

impl EncodedVars {
    pub fn maps(&self, g: &Graph) -> Vec<AttentionMap> {
        self.attention
            .iter()
            .enumerate()
            .flat_map(|(layer, mh)| mh.maps(g, layer, self.key_len))
            .collect()
    }
}

impl Translator {
    /// Xavier-initialized model; gloss-attention offset matrices start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_layout(&config, Init::Xavier(&mut rng));
        Ok(Self::assemble(config, params, layout))
    }

    /// All-zero parameters with the layout of `config`; used when loading.
    pub fn zeroed(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let (params, layout) = build_layout(&config, Init::Zeros);
        Ok(Self::assemble(config, params, layout))
    }

    fn assemble(config: ModelConfig, params: ParamStore, layout: Layout) -> Self {
        let norms = NormStats {
            video: RunningStats::new(config.d_model),
            text: RunningStats::new(config.d_model),
        };
        Self {
            config,
            params,
            norms,
            layout,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with(prefix))
            .collect()
    }

    /// Opens a forward pass. With `train` set, parameters are gradient leaves,
    /// batch norms use batch statistics, and dropout (seeded by `seed`) is on.
    pub fn session(&self, train: bool, seed: u64) -> Session<'_> {
        Session {
            model: self,
            graph: Graph::new(),
            bound: vec![None; self.params.len()],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            norms: self.norms.clone(),
        }
    }

    /// Eval-mode video embedding of a single clip.
    pub fn embed_video(&self, clip: &Tensor) -> Result<Tensor, ModelError> {
        let mut s = self.session(false, 0);
        let v = s.embed_videos(&[clip])?;
        Ok(s.graph.value(v[0]).clone())
    }

    /// Eval-mode text embedding of a single token sequence.
    pub fn embed_text(&self, ids: &[usize]) -> Result<Tensor, ModelError> {
        let mut s = self.session(false, 0);
        let v = s.embed_texts(&[ids])?;
        Ok(s.graph.value(v[0]).clone())
    }

    /// Eval-mode encoding of `features` (`T x D_in`), where `valid` marks
    /// real frames (a prefix; the rest is padding).
    pub fn encode(&self, features: &Tensor, valid: &[bool]) -> Result<EncoderOutput, ModelError> {
        let mut s = self.session(false, 0);
        let emb = s.embed_videos(&[features])?;
        let enc = s.encode(emb[0], valid)?;
        Ok(EncoderOutput {
            hidden: s.graph.value(enc.hidden).clone(),
            maps: enc.maps(&s.graph),
            embedding: s.graph.value(enc.embedding).data().to_vec(),
        })
    }

    /// Teacher-forced logits (`M x V`) for decoder input `prefix`.
    pub fn teacher_forced_logits(&self, features: &Tensor, prefix: &[usize]) -> Result<Tensor, ModelError> {
        let mut s = self.session(false, 0);
        let emb = s.embed_videos(&[features])?;
        let valid = vec![true; features.rows()];
        let enc = s.encode(emb[0], &valid)?;
        let dec_in = s.embed_texts(&[prefix])?;
        let logits = s.decode(enc.hidden, &enc.valid, dec_in[0])?;
        Ok(s.graph.value(logits).clone())
    }
}

/// One forward pass over a [`Translator`].
pub struct Session<'m> {
    model: &'m Translator,
    pub graph: Graph,
    bound: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
    /// Working copy of the batch-norm statistics, updated in train mode.
    pub norms: NormStats,
}

impl<'m> Session<'m> {
    pub fn model(&self) -> &'m Translator {
        self.model
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Graph node of a parameter, bound on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let t = self.model.params.get(id).clone();
        let v = if self.train {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.index()] = Some(v);
        v
    }

    /// Parameters bound so far with their graph nodes.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::new(i), v)))
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var, ModelError> {
        let (w, b) = (self.p(l.w), self.p(l.b));
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_row(y, b)?)
    }

    fn layer_norm(&mut self, x: Var, n: Norm) -> Result<Var, ModelError> {
        let (g, b) = (self.p(n.gain), self.p(n.bias));
        Ok(self.graph.layer_norm(x, g, b, self.model.config.layer_norm_eps)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let p = self.model.config.dropout;
        Ok(self.graph.dropout(x, p, self.train, &mut self.rng)?)
    }

    /// `relu(BN(W x + b)) + pos`, BN taken jointly over all rows of all
    /// parts, then split back per part.
    fn embed_rows(&mut self, parts: Var, lens: &[usize], proj: Linear, bn: Norm, video: bool) -> Result<Vec<Var>, ModelError> {
        let h = self.linear(parts, proj)?;
        let (g, b) = (self.p(bn.gain), self.p(bn.bias));
        let train = self.train;
        let stats = if video {
            &mut self.norms.video
        } else {
            &mut self.norms.text
        };
        let mode = if train {
            BatchNormMode::Train(stats)
        } else {
            BatchNormMode::Eval(stats)
        };
        let h = self.graph.batch_norm(h, g, b, mode)?;
        let h = self.graph.relu(h);
        let d = self.model.config.d_model;
        let mut out = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &len in lens {
            let part = self.graph.slice_rows(h, start, len)?;
            let pos = self.graph.constant(positional_block(0, len, d));
            let x = self.graph.add(part, pos)?;
            out.push(self.dropout(x)?);
            start += len;
        }
        Ok(out)
    }

    /// Embeds each clip (`T_i x D_in`).
    pub fn embed_videos(&mut self, clips: &[&Tensor]) -> Result<Vec<Var>, ModelError> {
        let d_in = self.model.config.input_dim;
        let mut rows = Vec::new();
        let mut lens = Vec::with_capacity(clips.len());
        for clip in clips {
            if clip.cols() != d_in || clip.shape().len() != 2 {
                return Err(ModelError::Input(format!(
                    "feature shape {:?} does not match input_dim {d_in}",
                    clip.shape()
                )));
            }
            rows.extend_from_slice(clip.data());
            lens.push(clip.rows());
        }
        let total = lens.iter().sum();
        let x = self.graph.constant(Tensor::matrix(total, d_in, rows));
        let model = self.model;
        let (proj, bn) = (model.layout.video, model.layout.video_bn);
        self.embed_rows(x, &lens, proj, bn, true)
    }

    /// Embeds each token sequence.
    pub fn embed_texts(&mut self, seqs: &[&[usize]]) -> Result<Vec<Var>, ModelError> {
        let vocab = self.model.config.vocab_size;
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if let Some(&bad) = seq.iter().find(|&&t| t >= vocab) {
                return Err(ModelError::Input(format!("token id {bad} outside vocabulary of {vocab}")));
            }
            ids.extend_from_slice(seq);
            lens.push(seq.len());
        }
        let model = self.model;
        let (table, proj, bn) = (model.layout.embedding, model.layout.text, model.layout.text_bn);
        let table = self.p(table);
        let e = self.graph.embedding_lookup(table, &ids)?;
        self.embed_rows(e, &lens, proj, bn, false)
    }

    fn attention_params(&mut self, ids: &AttnIds) -> MultiHeadParams {
        MultiHeadParams {
            heads: self.model.config.heads,
            w_q: self.p(ids.w_q),
            w_k: self.p(ids.w_k),
            w_v: self.p(ids.w_v),
            w_out: self.p(ids.w_out),
            offsets: ids.offsets.iter().map(|&o| self.p(o)).collect(),
        }
    }

    fn feed_forward(&mut self, x: Var, ff1: Linear, ff2: Linear) -> Result<Var, ModelError> {
        let h = self.linear(x, ff1)?;
        let h = self.graph.relu(h);
        self.linear(h, ff2)
    }

    /// Runs the encoder stack on embedded frames. `valid` marks real frames
    /// and must be a prefix.
    pub fn encode(&mut self, embedded: Var, valid: &[bool]) -> Result<EncodedVars, ModelError> {
        let model = self.model;
        let cfg = &model.config;
        let t = self.graph.value(embedded).rows();
        if valid.len() != t {
            return Err(ModelError::Input(format!("mask of {} for {t} frames", valid.len())));
        }
        let true_len = valid.iter().take_while(|&&v| v).count();
        if true_len == 0 || valid[true_len..].iter().any(|&v| v) {
            return Err(ModelError::Input("valid frames must form a non-empty prefix".into()));
        }
        let variant = cfg.attention_variant();
        let aggregation = cfg.aggregation;
        let layout = &model.layout;
        let (mut x, key_valid) = match layout.cls {
            Some(cls) => {
                let c = self.p(cls);
                let x = self.graph.concat_rows(&[c, embedded])?;
                let mut v = vec![true];
                v.extend_from_slice(valid);
                (x, v)
            }
            None => (embedded, valid.to_vec()),
        };
        let mask = KeyMask::from_valid(key_valid.clone());
        let mut attention = Vec::with_capacity(layout.encoder.len());
        for layer in &layout.encoder {
            let h = self.layer_norm(x, layer.ln1)?;
            let params = self.attention_params(&layer.attn);
            let a = multi_head(&mut self.graph, h, h, variant, &params, &mask)?;
            let z = self.dropout(a.output)?;
            x = self.graph.add(x, z)?;
            attention.push(a);
            let h = self.layer_norm(x, layer.ln2)?;
            let f = self.feed_forward(h, layer.ff1, layer.ff2)?;
            let f = self.dropout(f)?;
            x = self.graph.add(x, f)?;
        }
        let (hidden, embedding) = if layout.cls.is_some() {
            let hidden = self.graph.slice_rows(x, 1, t)?;
            (hidden, self.graph.slice_rows(x, 0, 1)?)
        } else {
            let real = if true_len == t {
                x
            } else {
                self.graph.slice_rows(x, 0, true_len)?
            };
            let e = match aggregation {
                Aggregation::Max => self.graph.max_rows(real)?,
                _ => self.graph.mean_rows(real)?,
            };
            (x, e)
        };
        Ok(EncodedVars {
            hidden,
            embedding,
            valid: valid.to_vec(),
            attention,
            key_len: key_valid.len(),
        })
    }

    /// Decoder logits (`M x V`) for embedded decoder input `target` attending
    /// to encoder states `memory`.
    pub fn decode(&mut self, memory: Var, memory_valid: &[bool], target: Var) -> Result<Var, ModelError> {
        let m = self.graph.value(target).rows();
        let model = self.model;
        let layout = &model.layout;
        let self_mask = KeyMask::causal(m);
        let cross_mask = KeyMask::from_valid(memory_valid.to_vec());
        let mut y = target;
        for layer in &layout.decoder {
            let h = self.layer_norm(y, layer.ln1)?;
            let params = self.attention_params(&layer.self_attn);
            let a = multi_head(&mut self.graph, h, h, AttentionVariant::SelfAttention, &params, &self_mask)?;
            let a = self.dropout(a.output)?;
            y = self.graph.add(y, a)?;
            let h = self.layer_norm(y, layer.ln2)?;
            let params = self.attention_params(&layer.cross_attn);
            let c = multi_head(&mut self.graph, h, memory, AttentionVariant::SelfAttention, &params, &cross_mask)?;
            let c = self.dropout(c.output)?;
            y = self.graph.add(y, c)?;
            let h = self.layer_norm(y, layer.ln3)?;
            let f = self.feed_forward(h, layer.ff1, layer.ff2)?;
            let f = self.dropout(f)?;
            y = self.graph.add(y, f)?;
        }
        let y = self.layer_norm(y, layout.final_ln)?;
        self.linear(y, layout.output)
    }
}
