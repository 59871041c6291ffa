//! Transformer encoder-decoder with token, position and language-tag
//! embeddings.
//!
//! Layout: pre-norm residual blocks, learned positions, exact GELU, and a
//! single token table shared by the encoder input, the decoder input and the
//! output projection. Both the masked-LM head and the decoder read logits
//! through that tied projection plus one output bias.

mod checkpoint;
mod params;

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{AttnSegment, Float, Tape, Var};
use crate::vocab::{TokenId, NUM_SPECIAL};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};
pub use params::{Gradients, GroupSet, Param, ParamGroup, ParamId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("language tag {id} out of range for {count} languages")]
    LanguageOutOfRange { id: usize, count: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub num_languages: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Toy defaults: 2+2 layers, width 64.
    pub fn toy(vocab_size: usize, num_languages: usize) -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            max_positions: 64,
            vocab_size,
            num_languages,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return bad("d_model, n_heads and d_ffn must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        if self.vocab_size <= NUM_SPECIAL {
            return bad("vocab_size must exceed the number of special tokens");
        }
        if self.num_languages == 0 {
            return bad("num_languages must be positive");
        }
        Ok(())
    }

    /// Closed-form parameter count of one group.
    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        let d = self.d_model;
        let f = self.d_ffn;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        match group {
            ParamGroup::WordEmbeddings => self.vocab_size * d,
            ParamGroup::TagAndPositionEmbeddings => (self.max_positions + self.num_languages) * d,
            ParamGroup::EncoderLayers => self.enc_layers * (2 * ln + attn + ffn) + ln,
            ParamGroup::DecoderLayers => self.dec_layers * (3 * ln + 2 * attn + ffn) + ln,
            ParamGroup::OutputHead => self.vocab_size,
        }
    }

    pub fn param_count(&self) -> usize {
        ParamGroup::ALL
            .iter()
            .map(|&g| self.group_param_count(g))
            .sum()
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayerIds {
    ln_attn: NormIds,
    attn: AttnIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecoderLayerIds {
    ln_self: NormIds,
    self_attn: AttnIds,
    ln_cross: NormIds,
    cross_attn: AttnIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    tok: ParamId,
    pos: ParamId,
    lang: ParamId,
    encoder: Vec<EncoderLayerIds>,
    enc_norm: NormIds,
    decoder: Vec<DecoderLayerIds>,
    dec_norm: NormIds,
    out_bias: ParamId,
}

/// Initial value recipe for a parameter.
#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

struct LayoutBuilder {
    specs: Vec<(String, ParamGroup, (usize, usize), Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, group: ParamGroup, shape: (usize, usize), init: Init) -> ParamId {
        self.specs.push((name, group, shape, init));
        ParamId(self.specs.len() - 1)
    }

    fn norm(&mut self, prefix: &str, group: ParamGroup, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), group, (1, d), Init::Ones),
            bias: self.add(format!("{prefix}.bias"), group, (1, d), Init::Zeros),
        }
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (
            self.add(format!("{prefix}.weight"), group, (fan_in, fan_out), Init::Uniform(bound)),
            self.add(format!("{prefix}.bias"), group, (1, fan_out), Init::Zeros),
        )
    }

    fn attn(&mut self, prefix: &str, group: ParamGroup, d: usize) -> AttnIds {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), group, d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), group, d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), group, d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.out"), group, d, d);
        AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, group: ParamGroup, d: usize, f: usize) -> FfnIds {
        let (w1, b1) = self.linear(&format!("{prefix}.in"), group, d, f);
        let (w2, b2) = self.linear(&format!("{prefix}.out"), group, f, d);
        FfnIds { w1, b1, w2, b2 }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, LayoutBuilder) {
    use ParamGroup::*;
    let d = cfg.d_model;
    let emb = Init::Uniform(3f64.sqrt() / (d as f64).sqrt());
    let mut b = LayoutBuilder { specs: Vec::new() };
    let tok = b.add("embed.tokens".into(), WordEmbeddings, (cfg.vocab_size, d), emb);
    let pos = b.add("embed.positions".into(), TagAndPositionEmbeddings, (cfg.max_positions, d), emb);
    let lang = b.add("embed.languages".into(), TagAndPositionEmbeddings, (cfg.num_languages, d), emb);
    let encoder = (0..cfg.enc_layers)
        .map(|i| {
            let p = format!("encoder.{i}");
            EncoderLayerIds {
                ln_attn: b.norm(&format!("{p}.attn_norm"), EncoderLayers, d),
                attn: b.attn(&format!("{p}.attn"), EncoderLayers, d),
                ln_ffn: b.norm(&format!("{p}.ffn_norm"), EncoderLayers, d),
                ffn: b.ffn(&format!("{p}.ffn"), EncoderLayers, d, cfg.d_ffn),
            }
        })
        .collect();
    let enc_norm = b.norm("encoder.final_norm", EncoderLayers, d);
    let decoder = (0..cfg.dec_layers)
        .map(|i| {
            let p = format!("decoder.{i}");
            DecoderLayerIds {
                ln_self: b.norm(&format!("{p}.self_norm"), DecoderLayers, d),
                self_attn: b.attn(&format!("{p}.self_attn"), DecoderLayers, d),
                ln_cross: b.norm(&format!("{p}.cross_norm"), DecoderLayers, d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), DecoderLayers, d),
                ln_ffn: b.norm(&format!("{p}.ffn_norm"), DecoderLayers, d),
                ffn: b.ffn(&format!("{p}.ffn"), DecoderLayers, d, cfg.d_ffn),
            }
        })
        .collect();
    let dec_norm = b.norm("decoder.final_norm", DecoderLayers, d);
    let out_bias = b.add("output.bias".into(), OutputHead, (1, cfg.vocab_size), Init::Zeros);
    (
        Layout {
            tok,
            pos,
            lang,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_bias,
        },
        b,
    )
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

impl<T: Float> Seq2SeqModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let params = builder
            .specs
            .into_iter()
            .map(|(name, group, shape, init)| {
                let value = match init {
                    Init::Zeros => Array2::zeros(shape),
                    Init::Ones => Array2::ones(shape),
                    Init::Uniform(bound) => {
                        Array2::from_shape_simple_fn(shape, || T::of(rng.gen_range(-bound..bound)))
                    }
                };
                Param { name, group, value }
            })
            .collect();
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// A model with every parameter zeroed; its logits are uniform.
    pub fn zeroed(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let params = builder
            .specs
            .into_iter()
            .map(|(name, group, shape, _)| Param {
                name,
                group,
                value: Array2::zeros(shape),
            })
            .collect();
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.layout.tok
    }

    pub fn position_embeddings(&self) -> ParamId {
        self.layout.pos
    }

    pub fn language_embeddings(&self) -> ParamId {
        self.layout.lang
    }

    pub fn output_bias(&self) -> ParamId {
        self.layout.out_bias
    }

    /// Parameters grouped for freeze control.
    pub fn partition_params(&self) -> Vec<(ParamGroup, Vec<ParamId>)> {
        ParamGroup::ALL
            .into_iter()
            .map(|g| {
                let ids = self
                    .param_ids()
                    .filter(|&id| self.params[id.0].group == g)
                    .collect();
                (g, ids)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names and little-endian values of the params in `groups`.
    pub fn digest(&self, groups: GroupSet) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| groups.contains(p.group)) {
            hasher.update(p.name.as_bytes());
            buf.clear();
            for &v in p.value.iter() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex(&hasher.finalize())
    }

    /// Convert to another float type.
    pub fn cast<U: Float>(&self) -> Seq2SeqModel<U> {
        Seq2SeqModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.mapv(|v| U::of(v.to_f64())),
                })
                .collect(),
        }
    }

    /// Sum of token, position and language-tag embeddings per position.
    pub fn embed(&self, ids: &[TokenId], langs: &[usize]) -> Result<Array2<T>, ModelError> {
        let mut batch = Packed::default();
        batch.push(ids, langs)?;
        let mut g = Graph::new(self, GroupSet::none());
        let out = g.embed(&batch)?;
        Ok(g.tape().value(out).clone())
    }

    /// Encoder states for one sequence; `pad[i] = true` marks padding.
    pub fn encode(
        &self,
        ids: &[TokenId],
        langs: &[usize],
        pad: Option<&[bool]>,
    ) -> Result<Array2<T>, ModelError> {
        let mut batch = Packed::default();
        match pad {
            Some(pad) => batch.push_padded(ids, langs, pad)?,
            None => batch.push(ids, langs)?,
        }
        let mut g = Graph::new(self, GroupSet::none());
        let out = g.encode(&batch)?;
        Ok(g.tape().value(out).clone())
    }

    /// Decoder logits for every position of `target` (which starts with BOS).
    pub fn decode_forward(
        &self,
        memory: &Array2<T>,
        src_pad: Option<&[bool]>,
        target: &[TokenId],
        tgt_lang: usize,
    ) -> Result<Array2<T>, ModelError> {
        if let Some(pad) = src_pad {
            if pad.len() != memory.nrows() {
                return Err(ModelError::Shape("pad mask length differs from memory".into()));
            }
        }
        if memory.ncols() != self.config.d_model {
            return Err(ModelError::Shape("memory width differs from d_model".into()));
        }
        let mut tgt = Packed::default();
        tgt.push_uniform(target, tgt_lang)?;
        let cross = CrossLayout {
            key_spans: vec![0..memory.nrows()],
            key_valid: src_pad.map(|p| p.iter().map(|&is_pad| !is_pad).collect()),
        };
        let mut g = Graph::new(self, GroupSet::none());
        let mem = g.tape_mut().constant(memory.clone());
        let hidden = g.decode(mem, &cross, &tgt)?;
        let logits = g.logits(hidden);
        Ok(g.tape().value(logits).clone())
    }

    /// Masked-LM logits at `positions` of the given encoder states.
    pub fn mlm_head(&self, states: &Array2<T>, positions: &[usize]) -> Result<Array2<T>, ModelError> {
        if let Some(&p) = positions.iter().find(|&&p| p >= states.nrows()) {
            return Err(ModelError::Shape(format!(
                "position {p} outside {} encoder states",
                states.nrows()
            )));
        }
        let mut g = Graph::new(self, GroupSet::none());
        let s = g.tape_mut().constant(states.clone());
        let sel = g.tape_mut().select_rows(s, positions);
        let logits = g.logits(sel);
        Ok(g.tape().value(logits).clone())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Several sequences packed row-wise for one encoder or decoder pass.
#[derive(Clone, Debug, Default)]
pub struct Packed {
    ids: Vec<usize>,
    langs: Vec<usize>,
    positions: Vec<usize>,
    spans: Vec<Range<usize>>,
    valid: Vec<bool>,
    any_pad: bool,
}

impl Packed {
    pub fn push(&mut self, ids: &[TokenId], langs: &[usize]) -> Result<(), ModelError> {
        self.push_inner(ids, langs, None)
    }

    pub fn push_uniform(&mut self, ids: &[TokenId], lang: usize) -> Result<(), ModelError> {
        let langs = vec![lang; ids.len()];
        self.push_inner(ids, &langs, None)
    }

    /// Like `push`, but positions restart at zero wherever the language tag
    /// changes, so each sentence of a concatenated pair starts at position 0.
    pub fn push_segmented(&mut self, ids: &[TokenId], langs: &[usize]) -> Result<(), ModelError> {
        self.push_inner(ids, langs, None)?;
        let start = self.positions.len() - ids.len();
        let mut pos = 0;
        for i in 0..ids.len() {
            if i > 0 && langs[i] != langs[i - 1] {
                pos = 0;
            }
            self.positions[start + i] = pos;
            pos += 1;
        }
        Ok(())
    }

    /// `pad[i] = true` marks position `i` as padding: never attended to.
    pub fn push_padded(&mut self, ids: &[TokenId], langs: &[usize], pad: &[bool]) -> Result<(), ModelError> {
        if pad.len() != ids.len() {
            return Err(ModelError::Shape("pad mask length differs from ids".into()));
        }
        self.push_inner(ids, langs, Some(pad))
    }

    fn push_inner(&mut self, ids: &[TokenId], langs: &[usize], pad: Option<&[bool]>) -> Result<(), ModelError> {
        if ids.len() != langs.len() {
            return Err(ModelError::Shape(format!(
                "{} ids but {} language tags",
                ids.len(),
                langs.len()
            )));
        }
        if ids.is_empty() {
            return Err(ModelError::Shape("empty sequence".into()));
        }
        let start = self.ids.len();
        self.ids.extend(ids.iter().map(|&i| i as usize));
        self.langs.extend_from_slice(langs);
        self.positions.extend(0..ids.len());
        match pad {
            Some(pad) => {
                self.any_pad |= pad.iter().any(|&p| p);
                self.valid.extend(pad.iter().map(|&p| !p));
            }
            None => self.valid.extend(std::iter::repeat_n(true, ids.len())),
        }
        self.spans.push(start..self.ids.len());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_seqs(&self) -> usize {
        self.spans.len()
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    /// Keys for cross attention from target sequence `i` to source sequence `i`.
    pub fn as_memory(&self) -> CrossLayout {
        CrossLayout {
            key_spans: self.spans.clone(),
            key_valid: self.any_pad.then(|| self.valid.clone()),
        }
    }

    fn key_valid(&self) -> Option<&[bool]> {
        self.any_pad.then_some(self.valid.as_slice())
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        for span in &self.spans {
            if span.len() > cfg.max_positions {
                return Err(ModelError::TooLong {
                    len: span.len(),
                    max: cfg.max_positions,
                });
            }
        }
        if let Some(&id) = self.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                size: cfg.vocab_size,
            });
        }
        if let Some(&id) = self.langs.iter().find(|&&l| l >= cfg.num_languages) {
            return Err(ModelError::LanguageOutOfRange {
                id,
                count: cfg.num_languages,
            });
        }
        Ok(())
    }
}

/// Which memory rows each target sequence may attend to.
#[derive(Clone, Debug)]
pub struct CrossLayout {
    pub key_spans: Vec<Range<usize>>,
    pub key_valid: Option<Vec<bool>>,
}

/// Builds forward computations for one model on a fresh tape.
pub struct Graph<'m, T: Float> {
    model: &'m Seq2SeqModel<T>,
    tape: Tape<T>,
    vars: Vec<Option<Var>>,
    trainable: GroupSet,
}

impl<'m, T: Float> Graph<'m, T> {
    pub fn new(model: &'m Seq2SeqModel<T>, trainable: GroupSet) -> Self {
        Self {
            model,
            tape: Tape::new(),
            vars: vec![None; model.params.len()],
            trainable,
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }

    fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let param = &self.model.params[id.0];
        let v = self
            .tape
            .leaf(param.value.clone(), self.trainable.contains(param.group));
        self.vars[id.0] = Some(v);
        v
    }

    pub fn embed(&mut self, batch: &Packed) -> Result<Var, ModelError> {
        batch.validate(&self.model.config)?;
        let l = &self.model.layout;
        let (tok, pos, lang) = (l.tok, l.pos, l.lang);
        let tok = self.p(tok);
        let pos = self.p(pos);
        let lang = self.p(lang);
        let t = self.tape.gather(tok, &batch.ids);
        let p = self.tape.gather(pos, &batch.positions);
        let g = self.tape.gather(lang, &batch.langs);
        let tp = self.tape.add(t, p);
        Ok(self.tape.add(tp, g))
    }

    fn norm(&mut self, x: Var, ids: &NormIds) -> Var {
        let gain = self.p(ids.gain);
        let bias = self.p(ids.bias);
        self.tape.layer_norm(x, gain, bias)
    }

    fn proj(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.p(w);
        let b = self.p(b);
        self.tape.linear(x, w, Some(b))
    }

    fn attention(
        &mut self,
        queries: Var,
        keys: Var,
        ids: &AttnIds,
        segments: Vec<AttnSegment>,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let q = self.proj(queries, ids.wq, ids.bq);
        let k = self.proj(keys, ids.wk, ids.bk);
        let v = self.proj(keys, ids.wv, ids.bv);
        let heads = self.model.config.n_heads;
        let a = self.tape.attention(q, k, v, heads, segments, key_valid);
        self.proj(a, ids.wo, ids.bo)
    }

    fn ffn(&mut self, x: Var, ids: &FfnIds) -> Var {
        let h = self.proj(x, ids.w1, ids.b1);
        let h = self.tape.gelu(h);
        self.proj(h, ids.w2, ids.b2)
    }

    /// Final-normalized encoder states, one row per packed position.
    pub fn encode(&mut self, batch: &Packed) -> Result<Var, ModelError> {
        let mut x = self.embed(batch)?;
        let segments: Vec<AttnSegment> = batch
            .spans
            .iter()
            .map(|s| AttnSegment {
                q: s.clone(),
                k: s.clone(),
                causal: false,
            })
            .collect();
        let layers = self.model.layout.encoder.clone();
        for layer in &layers {
            let h = self.norm(x, &layer.ln_attn);
            let a = self.attention(h, h, &layer.attn, segments.clone(), batch.key_valid());
            x = self.tape.add(x, a);
            let h = self.norm(x, &layer.ln_ffn);
            let f = self.ffn(h, &layer.ffn);
            x = self.tape.add(x, f);
        }
        let norm = self.model.layout.enc_norm.clone();
        Ok(self.norm(x, &norm))
    }

    /// Final-normalized decoder states for teacher-forced `tgt`.
    pub fn decode(&mut self, memory: Var, cross: &CrossLayout, tgt: &Packed) -> Result<Var, ModelError> {
        if cross.key_spans.len() != tgt.num_seqs() {
            return Err(ModelError::Shape(format!(
                "{} target sequences but {} memory spans",
                tgt.num_seqs(),
                cross.key_spans.len()
            )));
        }
        let mem_rows = self.tape.value(memory).nrows();
        if cross.key_spans.iter().any(|s| s.end > mem_rows) {
            return Err(ModelError::Shape("memory span outside memory".into()));
        }
        let mut x = self.embed(tgt)?;
        let self_segments: Vec<AttnSegment> = tgt
            .spans
            .iter()
            .map(|s| AttnSegment {
                q: s.clone(),
                k: s.clone(),
                causal: true,
            })
            .collect();
        let cross_segments: Vec<AttnSegment> = tgt
            .spans
            .iter()
            .zip(&cross.key_spans)
            .map(|(q, k)| AttnSegment {
                q: q.clone(),
                k: k.clone(),
                causal: false,
            })
            .collect();
        let layers = self.model.layout.decoder.clone();
        for layer in &layers {
            let h = self.norm(x, &layer.ln_self);
            let a = self.attention(h, h, &layer.self_attn, self_segments.clone(), None);
            x = self.tape.add(x, a);
            let h = self.norm(x, &layer.ln_cross);
            let a = self.attention(
                h,
                memory,
                &layer.cross_attn,
                cross_segments.clone(),
                cross.key_valid.as_deref(),
            );
            x = self.tape.add(x, a);
            let h = self.norm(x, &layer.ln_ffn);
            let f = self.ffn(h, &layer.ffn);
            x = self.tape.add(x, f);
        }
        let norm = self.model.layout.dec_norm.clone();
        Ok(self.norm(x, &norm))
    }

    /// Vocabulary logits through the tied token table and output bias.
    pub fn logits(&mut self, hidden: Var) -> Var {
        let tok = self.p(self.model.layout.tok);
        let bias = self.p(self.model.layout.out_bias);
        self.tape.linear_t(hidden, tok, Some(bias))
    }

    /// Backpropagate `loss` and collect per-parameter gradients.
    pub fn gradients(&self, loss: Var) -> Gradients<T> {
        let mut grads = self.tape.backward(loss);
        Gradients::from_vec(
            self.vars
                .iter()
                .map(|v| v.and_then(|v| grads.take(v)))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests;
