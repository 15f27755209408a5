//! Post-norm encoder-decoder transformer over the autodiff tape.
//!
//! The model owns a flat list of named parameters and replays them onto a
//! [`Graph`] for every forward pass. Parameter names are stable paths like
//! `enc.0.attn.wq` or `dec.1.ffn.b2`; the attention and feed-forward weight
//! matrices carry an `auto_sized` flag marking them as targets for the
//! group-sparse regularizers, with rows as the unit that lives or dies.
//!
//! Layout conventions, fixed across the crate:
//! - activations are row-major `(batch * seq, d_model)` between sublayers,
//!   split to `(batch * heads, seq, head_dim)` only inside attention;
//! - every sublayer is residual `x + f(x)` followed by layer norm, and a
//!   sublayer listed in `removed` degenerates to the bare layer norm;
//! - token ids 0, 1, 2 are padding, begin-of-sequence, and end-of-sequence;
//! - masks add `-inf` to attention scores before softmax: encoder self and
//!   cross attention hide padded source keys, decoder self attention is
//!   causal (trailing padding makes that safe without a key mask).

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

/// Which stack a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Architecture description. `ffn_dims` lists the hidden width of every
/// feed-forward sublayer, encoder layers first, so pruning can shrink each
/// one independently.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dims: Vec<usize>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Sublayer ids (`enc.0.ffn`, `dec.1.cross_attn`, ...) that have been
    /// deleted outright; their parameters do not exist and the forward pass
    /// keeps only the trailing layer norm.
    pub removed: BTreeSet<String>,
}

impl ModelConfig {
    /// Config with the same feed-forward width everywhere.
    pub fn uniform(
        encoder_layers: usize,
        decoder_layers: usize,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        vocab_size: usize,
        max_len: usize,
        dropout: f64,
    ) -> Self {
        ModelConfig {
            encoder_layers,
            decoder_layers,
            d_model,
            heads,
            ffn_dims: vec![ffn_dim; encoder_layers + decoder_layers],
            vocab_size,
            max_len,
            dropout,
            removed: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("encoder_layers and decoder_layers must be at least 1".to_string());
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!(
                "d_model must be positive and even, got {}",
                self.d_model
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "heads must divide d_model, got {} heads at d_model {}",
                self.heads, self.d_model
            ));
        }
        if self.ffn_dims.len() != self.encoder_layers + self.decoder_layers {
            return fail(format!(
                "ffn_dims must list one width per layer: expected {}, got {}",
                self.encoder_layers + self.decoder_layers,
                self.ffn_dims.len()
            ));
        }
        if self.vocab_size < 4 {
            return fail(format!(
                "vocab_size must be at least 4, got {}",
                self.vocab_size
            ));
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) || !self.dropout.is_finite() {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        let known: BTreeSet<String> = self.sublayer_ids().into_iter().collect();
        for id in &self.removed {
            if !known.contains(id) {
                return fail(format!("removed lists unknown sublayer {id}"));
            }
        }
        for (pos, &dim) in self.ffn_dims.iter().enumerate() {
            let id = self.ffn_sublayer_id(pos);
            if self.removed.contains(&id) {
                if dim != 0 {
                    return fail(format!(
                        "removed sublayer {id} must have ffn width 0, got {dim}"
                    ));
                }
            } else if dim == 0 {
                return fail(format!("ffn width for {id} must be positive"));
            }
        }
        Ok(())
    }

    /// All attention and feed-forward sublayer ids in forward order.
    pub fn sublayer_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.encoder_layers {
            out.push(format!("enc.{i}.attn"));
            out.push(format!("enc.{i}.ffn"));
        }
        for i in 0..self.decoder_layers {
            out.push(format!("dec.{i}.self_attn"));
            out.push(format!("dec.{i}.cross_attn"));
            out.push(format!("dec.{i}.ffn"));
        }
        out
    }

    /// Feed-forward width of a layer; `layer` counts within the side.
    pub fn ffn_dim(&self, side: Side, layer: usize) -> usize {
        match side {
            Side::Encoder => self.ffn_dims[layer],
            Side::Decoder => self.ffn_dims[self.encoder_layers + layer],
        }
    }

    /// Position of a side-local layer in `ffn_dims`.
    pub fn ffn_pos(&self, side: Side, layer: usize) -> usize {
        match side {
            Side::Encoder => layer,
            Side::Decoder => self.encoder_layers + layer,
        }
    }

    fn ffn_sublayer_id(&self, pos: usize) -> String {
        if pos < self.encoder_layers {
            format!("enc.{pos}.ffn")
        } else {
            format!("dec.{}.ffn", pos - self.encoder_layers)
        }
    }

    pub fn is_removed(&self, sublayer: &str) -> bool {
        self.removed.contains(sublayer)
    }

    /// One `key=value` line per field, keys sorted, lists comma-joined.
    /// This text is the checkpoint header; parsing it back is exact.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let ffn: Vec<String> = self.ffn_dims.iter().map(|d| d.to_string()).collect();
        let removed: Vec<String> = self.removed.iter().cloned().collect();
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "decoder_layers={}", self.decoder_layers);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "encoder_layers={}", self.encoder_layers);
        let _ = writeln!(s, "ffn_dims={}", ffn.join(","));
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "max_len={}", self.max_len);
        let _ = writeln!(s, "removed={}", removed.join(","));
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        s
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without '=': {line}")))?;
            if fields.insert(key, value).is_some() {
                return Err(Error::Format(format!("duplicate config key {key}")));
            }
        }
        let mut take = |key: &str| {
            fields
                .remove(key)
                .ok_or_else(|| Error::Format(format!("config missing key {key}")))
        };
        let parse_usize = |key: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("config key {key} has bad value {v}")))
        };
        let d_model = parse_usize("d_model", take("d_model")?)?;
        let decoder_layers = parse_usize("decoder_layers", take("decoder_layers")?)?;
        let dropout_raw = take("dropout")?;
        let dropout = dropout_raw.parse::<f64>().map_err(|_| {
            Error::Format(format!("config key dropout has bad value {dropout_raw}"))
        })?;
        let encoder_layers = parse_usize("encoder_layers", take("encoder_layers")?)?;
        let ffn_raw = take("ffn_dims")?;
        let ffn_dims = ffn_raw
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| parse_usize("ffn_dims", p))
            .collect::<Result<Vec<usize>>>()?;
        let heads = parse_usize("heads", take("heads")?)?;
        let max_len = parse_usize("max_len", take("max_len")?)?;
        let removed_raw = take("removed")?;
        let removed: BTreeSet<String> = removed_raw
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| p.to_string())
            .collect();
        let vocab_size = parse_usize("vocab_size", take("vocab_size")?)?;
        if let Some((key, _)) = fields.iter().next() {
            return Err(Error::Format(format!("config has unknown key {key}")));
        }
        let config = ModelConfig {
            encoder_layers,
            decoder_layers,
            d_model,
            heads,
            ffn_dims,
            vocab_size,
            max_len,
            dropout,
            removed,
        };
        config
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(config)
    }

    /// Every parameter the architecture requires, in construction order.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let v = self.vocab_size;
        let mut out = vec![
            ParamSpec::weight("src_embed.weight", vec![v, d], false),
            ParamSpec::weight("tgt_embed.weight", vec![v, d], false),
        ];
        let attention = |out: &mut Vec<ParamSpec>, prefix: &str| {
            for name in ["wq", "wk", "wv", "wo"] {
                out.push(ParamSpec::weight(
                    &format!("{prefix}.{name}"),
                    vec![d, d],
                    true,
                ));
                out.push(ParamSpec::zero(
                    &format!("{prefix}.b{}", &name[1..]),
                    vec![d],
                ));
            }
        };
        let norm = |out: &mut Vec<ParamSpec>, prefix: &str| {
            out.push(ParamSpec::gain(&format!("{prefix}.gain"), vec![d]));
            out.push(ParamSpec::zero(&format!("{prefix}.shift"), vec![d]));
        };
        let ffn = |out: &mut Vec<ParamSpec>, prefix: &str, width: usize| {
            out.push(ParamSpec::weight(
                &format!("{prefix}.w1"),
                vec![width, d],
                true,
            ));
            out.push(ParamSpec::zero(&format!("{prefix}.b1"), vec![width]));
            out.push(ParamSpec::weight(
                &format!("{prefix}.w2"),
                vec![d, width],
                true,
            ));
            out.push(ParamSpec::zero(&format!("{prefix}.b2"), vec![d]));
        };
        for i in 0..self.encoder_layers {
            if !self.is_removed(&format!("enc.{i}.attn")) {
                attention(&mut out, &format!("enc.{i}.attn"));
            }
            norm(&mut out, &format!("enc.{i}.norm1"));
            if !self.is_removed(&format!("enc.{i}.ffn")) {
                ffn(
                    &mut out,
                    &format!("enc.{i}.ffn"),
                    self.ffn_dim(Side::Encoder, i),
                );
            }
            norm(&mut out, &format!("enc.{i}.norm2"));
        }
        for i in 0..self.decoder_layers {
            if !self.is_removed(&format!("dec.{i}.self_attn")) {
                attention(&mut out, &format!("dec.{i}.self_attn"));
            }
            norm(&mut out, &format!("dec.{i}.norm1"));
            if !self.is_removed(&format!("dec.{i}.cross_attn")) {
                attention(&mut out, &format!("dec.{i}.cross_attn"));
            }
            norm(&mut out, &format!("dec.{i}.norm2"));
            if !self.is_removed(&format!("dec.{i}.ffn")) {
                ffn(
                    &mut out,
                    &format!("dec.{i}.ffn"),
                    self.ffn_dim(Side::Decoder, i),
                );
            }
            norm(&mut out, &format!("dec.{i}.norm3"));
        }
        out.push(ParamSpec::weight("out_proj.weight", vec![v, d], false));
        out.push(ParamSpec::zero("out_proj.bias", vec![v]));
        out
    }
}

/// How a parameter is born.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// Uniform in `±1/sqrt(fan_in)` where fan_in is the second dimension.
    Uniform,
    /// All ones (layer norm gains).
    Ones,
    /// All zeros (biases and shifts).
    Zeros,
}

/// Name, shape, init rule, and auto-sizing eligibility of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub id: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
    pub auto_sized: bool,
}

impl ParamSpec {
    fn weight(id: &str, shape: Vec<usize>, auto_sized: bool) -> Self {
        ParamSpec {
            id: id.to_string(),
            shape,
            init: ParamInit::Uniform,
            auto_sized,
        }
    }

    fn gain(id: &str, shape: Vec<usize>) -> Self {
        ParamSpec {
            id: id.to_string(),
            shape,
            init: ParamInit::Ones,
            auto_sized: false,
        }
    }

    fn zero(id: &str, shape: Vec<usize>) -> Self {
        ParamSpec {
            id: id.to_string(),
            shape,
            init: ParamInit::Zeros,
            auto_sized: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar = f32> {
    pub id: String,
    pub value: Tensor<S>,
    pub auto_sized: bool,
}

/// Padded batch in row-major layout. `labels` equal to padding are excluded
/// from the loss.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: Vec<u32>,
    pub dec_in: Vec<u32>,
    pub labels: Vec<u32>,
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
}

impl Batch {
    pub fn active_labels(&self) -> Vec<bool> {
        self.labels.iter().map(|&t| t != PAD_ID).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TransformerModel<S: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Parameter<S>>,
    index: BTreeMap<String, usize>,
    pos_table: Tensor<S>,
}

impl<S: Scalar> TransformerModel<S> {
    /// Fresh model. Weight draws come from one ChaCha stream in parameter
    /// order, so a seed pins every initial value regardless of scalar type.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for spec in config.parameter_specs() {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<S> = match spec.init {
                ParamInit::Uniform => {
                    let bound = 1.0 / (spec.shape[1] as f64).sqrt();
                    (0..numel)
                        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                        .collect()
                }
                ParamInit::Ones => vec![S::ONE; numel],
                ParamInit::Zeros => vec![S::ZERO; numel],
            };
            params.push(Parameter {
                id: spec.id,
                value: Tensor::new(spec.shape, data)?,
                auto_sized: spec.auto_sized,
            });
        }
        Self::assemble(config, params)
    }

    /// Rebuild a model from loaded parameters. The set must match the
    /// config's expected names and shapes exactly.
    pub fn from_parts(config: ModelConfig, mut params: Vec<Parameter<S>>) -> Result<Self> {
        config.validate()?;
        let specs = config.parameter_specs();
        if params.len() != specs.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: expected {}, got {}",
                specs.len(),
                params.len()
            )));
        }
        params.sort_by(|a, b| a.id.cmp(&b.id));
        let mut by_id: BTreeMap<String, Parameter<S>> = BTreeMap::new();
        for p in params {
            if by_id.insert(p.id.clone(), p).is_some() {
                return Err(Error::Format("duplicate parameter id".to_string()));
            }
        }
        let mut ordered = Vec::with_capacity(specs.len());
        for spec in &specs {
            let mut p = by_id
                .remove(&spec.id)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", spec.id)))?;
            if p.value.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.id,
                    p.value.shape(),
                    spec.shape
                )));
            }
            p.auto_sized = spec.auto_sized;
            ordered.push(p);
        }
        Self::assemble(config, ordered)
    }

    fn assemble(config: ModelConfig, params: Vec<Parameter<S>>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            index.insert(p.id.clone(), i);
        }
        let pos_table = sinusoidal_table(config.max_len, config.d_model)?;
        Ok(TransformerModel {
            config,
            params,
            index,
            pos_table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<S>] {
        &mut self.params
    }

    pub fn param_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn param(&self, id: &str) -> Option<&Parameter<S>> {
        self.param_index(id).map(|i| &self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn leaf(&self, g: &mut Graph<S>, id: &str) -> Result<Var> {
        let idx = self
            .param_index(id)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named {id}")))?;
        Ok(g.param(self.params[idx].value.clone(), idx))
    }

    /// Token embedding, scaled by sqrt(d_model), plus positions, with
    /// dropout when the graph is in training mode.
    fn embed_sequence(
        &self,
        g: &mut Graph<S>,
        table: &str,
        ids: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let t = self.leaf(g, table)?;
        let e = g.embed(t, ids)?;
        let e = g.scale(e, S::from_f64((self.config.d_model as f64).sqrt()));
        let d = self.config.d_model;
        let mut tile = Vec::with_capacity(batch * seq * d);
        for _ in 0..batch {
            tile.extend_from_slice(&self.pos_table.data()[..seq * d]);
        }
        let pe = g.constant(Tensor::new(vec![batch * seq, d], tile)?);
        let x = g.add(e, pe)?;
        g.dropout(x, self.config.dropout)
    }

    /// Multi-head attention sublayer reading queries from `x_q` and keys and
    /// values from `x_kv`. `mask` entries are added to the raw scores.
    fn attention(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        x_q: Var,
        x_kv: Var,
        dims: AttnDims,
        mask: Option<Var>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let head_dim = self.config.d_model / heads;
        let (wq, bq) = (
            self.leaf(g, &format!("{prefix}.wq"))?,
            self.leaf(g, &format!("{prefix}.bq"))?,
        );
        let (wk, bk) = (
            self.leaf(g, &format!("{prefix}.wk"))?,
            self.leaf(g, &format!("{prefix}.bk"))?,
        );
        let (wv, bv) = (
            self.leaf(g, &format!("{prefix}.wv"))?,
            self.leaf(g, &format!("{prefix}.bv"))?,
        );
        let (wo, bo) = (
            self.leaf(g, &format!("{prefix}.wo"))?,
            self.leaf(g, &format!("{prefix}.bo"))?,
        );
        let q = g.linear(x_q, wq, bq)?;
        let k = g.linear(x_kv, wk, bk)?;
        let v = g.linear(x_kv, wv, bv)?;
        let qh = g.split_heads(q, dims.batch, dims.q_len, heads)?;
        let kh = g.split_heads(k, dims.batch, dims.kv_len, heads)?;
        let vh = g.split_heads(v, dims.batch, dims.kv_len, heads)?;
        let scores = g.bmm(qh, kh, true)?;
        let scores = g.scale(scores, S::from_f64(1.0 / (head_dim as f64).sqrt()));
        let scores = match mask {
            Some(m) => g.add(scores, m)?,
            None => scores,
        };
        let probs = g.softmax(scores)?;
        let ctx = g.bmm(probs, vh, false)?;
        let merged = g.merge_heads(ctx, dims.batch, dims.q_len, heads)?;
        g.linear(merged, wo, bo)
    }

    fn ffn(&self, g: &mut Graph<S>, prefix: &str, x: Var) -> Result<Var> {
        let (w1, b1) = (
            self.leaf(g, &format!("{prefix}.w1"))?,
            self.leaf(g, &format!("{prefix}.b1"))?,
        );
        let (w2, b2) = (
            self.leaf(g, &format!("{prefix}.w2"))?,
            self.leaf(g, &format!("{prefix}.b2"))?,
        );
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }

    /// Residual + dropout + post layer norm around `inner`, or just the norm
    /// when the sublayer has been removed.
    fn sublayer<F>(
        &self,
        g: &mut Graph<S>,
        x: Var,
        sub_id: &str,
        norm: &str,
        inner: F,
    ) -> Result<Var>
    where
        F: FnOnce(&Self, &mut Graph<S>, Var) -> Result<Var>,
    {
        let mixed = if self.config.is_removed(sub_id) {
            x
        } else {
            let y = inner(self, g, x)?;
            let y = g.dropout(y, self.config.dropout)?;
            g.add(x, y)?
        };
        let gain = self.leaf(g, &format!("{norm}.gain"))?;
        let shift = self.leaf(g, &format!("{norm}.shift"))?;
        g.layer_norm(mixed, gain, shift)
    }

    /// Logits for a padded batch, shape `(batch * tgt_len, vocab)`.
    pub fn forward_batch(
        &self,
        g: &mut Graph<S>,
        src: &[u32],
        dec_in: &[u32],
        batch: usize,
        src_len: usize,
        tgt_len: usize,
    ) -> Result<Var> {
        self.check_tokens(src, batch, src_len, "src")?;
        self.check_tokens(dec_in, batch, tgt_len, "dec_in")?;
        for b in 0..batch {
            if src[b * src_len..(b + 1) * src_len]
                .iter()
                .all(|&t| t == PAD_ID)
            {
                return Err(Error::InvalidInput(format!(
                    "source row {b} is all padding"
                )));
            }
        }
        let heads = self.config.heads;

        let mut x = self.embed_sequence(g, "src_embed.weight", src, batch, src_len)?;
        let enc_mask = g.constant(key_pad_mask(src, batch, src_len, src_len, heads));
        for i in 0..self.config.encoder_layers {
            let attn_id = format!("enc.{i}.attn");
            let dims = AttnDims {
                batch,
                q_len: src_len,
                kv_len: src_len,
            };
            x = self.sublayer(g, x, &attn_id, &format!("enc.{i}.norm1"), |m, g, x| {
                m.attention(g, &attn_id, x, x, dims, Some(enc_mask))
            })?;
            let ffn_id = format!("enc.{i}.ffn");
            x = self.sublayer(g, x, &ffn_id, &format!("enc.{i}.norm2"), |m, g, x| {
                m.ffn(g, &ffn_id, x)
            })?;
        }
        let memory = x;

        let mut y = self.embed_sequence(g, "tgt_embed.weight", dec_in, batch, tgt_len)?;
        let causal = g.constant(causal_mask(batch, tgt_len, heads));
        let cross = g.constant(key_pad_mask(src, batch, tgt_len, src_len, heads));
        for i in 0..self.config.decoder_layers {
            let self_id = format!("dec.{i}.self_attn");
            let self_dims = AttnDims {
                batch,
                q_len: tgt_len,
                kv_len: tgt_len,
            };
            y = self.sublayer(g, y, &self_id, &format!("dec.{i}.norm1"), |m, g, y| {
                m.attention(g, &self_id, y, y, self_dims, Some(causal))
            })?;
            let cross_id = format!("dec.{i}.cross_attn");
            let cross_dims = AttnDims {
                batch,
                q_len: tgt_len,
                kv_len: src_len,
            };
            y = self.sublayer(g, y, &cross_id, &format!("dec.{i}.norm2"), |m, g, y| {
                m.attention(g, &cross_id, y, memory, cross_dims, Some(cross))
            })?;
            let ffn_id = format!("dec.{i}.ffn");
            y = self.sublayer(g, y, &ffn_id, &format!("dec.{i}.norm3"), |m, g, y| {
                m.ffn(g, &ffn_id, y)
            })?;
        }

        let w = self.leaf(g, "out_proj.weight")?;
        let b = self.leaf(g, "out_proj.bias")?;
        g.linear(y, w, b)
    }

    /// Forward plus label-smoothed loss. Returns `(logits, loss)`.
    pub fn batch_loss(&self, g: &mut Graph<S>, batch: &Batch, epsilon: f64) -> Result<(Var, Var)> {
        if batch.labels.len() != batch.batch * batch.tgt_len {
            return Err(Error::InvalidInput(format!(
                "labels length {} does not match batch {} x tgt_len {}",
                batch.labels.len(),
                batch.batch,
                batch.tgt_len
            )));
        }
        let logits = self.forward_batch(
            g,
            &batch.src,
            &batch.dec_in,
            batch.batch,
            batch.src_len,
            batch.tgt_len,
        )?;
        let lp = g.log_softmax(logits)?;
        let loss = g.smoothed_nll(lp, &batch.labels, &batch.active_labels(), epsilon)?;
        Ok((logits, loss))
    }

    /// Evaluation-mode logits for one source and decoder prefix, shape
    /// `(prefix_len, vocab)`.
    pub fn logits_for_prefix(&self, src: &[u32], dec_in: &[u32]) -> Result<Tensor<S>> {
        let mut g = Graph::eval();
        let logits = self.forward_batch(&mut g, src, dec_in, 1, src.len(), dec_in.len())?;
        Ok(g.value(logits).clone())
    }

    /// Greedy decoding for a batch of sources; stops each row at
    /// end-of-sequence and every row after `max_steps` tokens. Ties in the
    /// argmax break toward the lower token id.
    pub fn greedy_decode_batch(
        &self,
        srcs: &[Vec<u32>],
        max_steps: usize,
    ) -> Result<Vec<Vec<u32>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let src_len = srcs.iter().map(|s| s.len()).max().expect("nonempty");
        if src_len == 0 {
            return Err(Error::InvalidInput("empty source sequence".to_string()));
        }
        if max_steps + 1 > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "decode length {} exceeds max_len {}",
                max_steps + 1,
                self.config.max_len
            )));
        }
        let batch = srcs.len();
        let mut src = vec![PAD_ID; batch * src_len];
        for (b, s) in srcs.iter().enumerate() {
            src[b * src_len..b * src_len + s.len()].copy_from_slice(s);
        }
        let vocab = self.config.vocab_size;
        let mut dec: Vec<u32> = Vec::with_capacity(batch * (max_steps + 1));
        for _ in 0..batch {
            dec.push(BOS_ID);
        }
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        for step in 0..max_steps {
            let t = step + 1;
            let mut g = Graph::eval();
            let logits = self.forward_batch(&mut g, &src, &dec, batch, src_len, t)?;
            let data = g.value(logits).data();
            let mut next_tokens = Vec::with_capacity(batch);
            for b in 0..batch {
                let row = &data[((b * t) + t - 1) * vocab..((b * t) + t) * vocab];
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                next_tokens.push(best as u32);
            }
            // dec is row-major (batch, t); rebuild with one more column
            let mut grown = Vec::with_capacity(batch * (t + 1));
            for b in 0..batch {
                grown.extend_from_slice(&dec[b * t..(b + 1) * t]);
                let tok = if done[b] { EOS_ID } else { next_tokens[b] };
                if !done[b] {
                    if tok == EOS_ID {
                        done[b] = true;
                    } else {
                        out[b].push(tok);
                    }
                }
                grown.push(tok);
            }
            dec = grown;
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    pub fn greedy_decode(&self, src: &[u32], max_steps: usize) -> Result<Vec<u32>> {
        Ok(self
            .greedy_decode_batch(&[src.to_vec()], max_steps)?
            .pop()
            .expect("one row in, one row out"))
    }

    fn check_tokens(&self, ids: &[u32], batch: usize, seq: usize, what: &str) -> Result<()> {
        if batch == 0 || seq == 0 {
            return Err(Error::InvalidInput(format!(
                "{what}: empty batch or sequence"
            )));
        }
        if ids.len() != batch * seq {
            return Err(Error::InvalidInput(format!(
                "{what}: {} tokens do not fill batch {batch} x len {seq}",
                ids.len()
            )));
        }
        if seq > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "{what}: length {seq} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "{what}: token {bad} out of range (vocab {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct AttnDims {
    batch: usize,
    q_len: usize,
    kv_len: usize,
}

/// Scores mask hiding padded source keys: shape
/// `(batch * heads, q_len, kv_len)`, `-inf` where the key is padding.
fn key_pad_mask<S: Scalar>(
    src: &[u32],
    batch: usize,
    q_len: usize,
    kv_len: usize,
    heads: usize,
) -> Tensor<S> {
    let neg_inf = S::from_f64(f64::NEG_INFINITY);
    let mut data = vec![S::ZERO; batch * heads * q_len * kv_len];
    for b in 0..batch {
        for j in 0..kv_len {
            if src[b * kv_len + j] != PAD_ID {
                continue;
            }
            for h in 0..heads {
                let base = ((b * heads + h) * q_len) * kv_len;
                for i in 0..q_len {
                    data[base + i * kv_len + j] = neg_inf;
                }
            }
        }
    }
    Tensor::new(vec![batch * heads, q_len, kv_len], data).expect("mask shape")
}

/// Strictly-upper-triangular `-inf` mask: position `i` may attend to
/// positions `0..=i` only.
fn causal_mask<S: Scalar>(batch: usize, len: usize, heads: usize) -> Tensor<S> {
    let neg_inf = S::from_f64(f64::NEG_INFINITY);
    let mut data = vec![S::ZERO; batch * heads * len * len];
    for bh in 0..batch * heads {
        for i in 0..len {
            for j in i + 1..len {
                data[(bh * len + i) * len + j] = neg_inf;
            }
        }
    }
    Tensor::new(vec![batch * heads, len, len], data).expect("mask shape")
}

/// Interleaved sine/cosine position table, shape `(max_len, d_model)`.
fn sinusoidal_table<S: Scalar>(max_len: usize, d_model: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(max_len * d_model);
    for t in 0..max_len {
        for pair in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * pair as f64 / d_model as f64);
            data.push(S::from_f64(angle.sin()));
            data.push(S::from_f64(angle.cos()));
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}
