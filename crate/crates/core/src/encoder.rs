//! Transformer encoder with summed token/type/position embeddings, plus the
//! masked-LM, real/fake and task heads.
//!
//! Layers use post-layer-norm residuals and GELU feed-forward blocks. The MLM
//! projection shares its weight with the token embedding table unless
//! `tie_mlm` is turned off.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{MaskedExample, TYPE_VOCAB};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, TensorError, Var};
use crate::textnorm::PAD;

/// Additive attention logit for padded keys.
pub const MASKED_LOGIT: f32 = -1e9;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid model config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{table} table: id {index} out of range 0..{bound}")]
    IdOutOfRange {
        table: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("head mismatch: {0}")]
    HeadMismatch(String),
    #[error("parameter set does not match config: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward width; `None` means `4 × hidden`.
    pub ffn_hidden: Option<usize>,
    pub max_len: usize,
    /// 0 means "take it from the vocabulary file".
    pub vocab_size: usize,
    pub type_vocab: usize,
    pub dropout: f32,
    pub tie_mlm: bool,
    pub init_std: f32,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn_hidden: None,
            max_len: 128,
            vocab_size: 0,
            type_vocab: TYPE_VOCAB,
            dropout: 0.1,
            tie_mlm: true,
            init_std: 0.02,
            ln_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    /// 12 layers, 768 hidden, 12 heads over a 17,964-entry vocabulary.
    pub fn base_scale() -> Self {
        ModelConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            max_len: 512,
            vocab_size: 17_964,
            ..Default::default()
        }
    }

    pub fn ffn(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.hidden)
    }

    /// Fills derived defaults.
    pub fn normalized(&self) -> Self {
        ModelConfig {
            ffn_hidden: Some(self.ffn()),
            ..self.clone()
        }
    }

    /// Every violated constraint, as `(key, message)`.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |k: &str, m: String| out.push((k.to_string(), m));
        if self.layers == 0 {
            bad("layers", "must be at least 1".into());
        }
        if self.hidden == 0 {
            bad("hidden", "must be positive".into());
        }
        if self.heads == 0 {
            bad("heads", "must be positive".into());
        } else if !self.hidden.is_multiple_of(self.heads) {
            bad(
                "hidden",
                format!(
                    "hidden not divisible by heads ({} % {} != 0)",
                    self.hidden, self.heads
                ),
            );
        }
        if self.ffn() == 0 {
            bad("ffn_hidden", "must be positive".into());
        }
        if self.max_len < 4 {
            bad("max_len", format!("max_len {} below 4", self.max_len));
        }
        if self.vocab_size < 5 {
            bad(
                "vocab_size",
                format!("vocab_size {} below 5", self.vocab_size),
            );
        }
        if self.type_vocab < TYPE_VOCAB {
            bad(
                "type_vocab",
                format!("type_vocab {} below {TYPE_VOCAB}", self.type_vocab),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad(
                "dropout",
                format!("dropout {} outside [0, 1)", self.dropout),
            );
        }
        if !(self.init_std > 0.0) {
            bad("init_std", "must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            bad("ln_eps", "must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(EncoderError::Config(
                p.into_iter().map(|(k, m)| format!("{k}: {m}")).collect(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// CLS state → `n_out` classes.
    SequenceClassification,
    /// Every position → `n_out` tags.
    TokenTagging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub n_out: usize,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    attn_ln: Norm,
    ffn_in: Affine,
    ffn_out: Affine,
    ffn_ln: Norm,
}

#[derive(Debug, Clone)]
struct ParamIds {
    token: ParamId,
    typ: ParamId,
    position: ParamId,
    emb_ln: Norm,
    layers: Vec<LayerIds>,
    mlm_weight: Option<ParamId>,
    mlm_bias: ParamId,
    rf: Affine,
}

/// Names and shapes of every encoder parameter, in registration order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (cfg.hidden, cfg.ffn());
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("emb.token".into(), vec![cfg.vocab_size, h]),
        ("emb.type".into(), vec![cfg.type_vocab, h]),
        ("emb.position".into(), vec![cfg.max_len, h]),
        ("emb.ln.gamma".into(), vec![h]),
        ("emb.ln.beta".into(), vec![h]),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer.{l}.{s}");
        for proj in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.{proj}.weight")), vec![h, h]));
            out.push((p(&format!("attn.{proj}.bias")), vec![h]));
        }
        out.push((p("attn.ln.gamma"), vec![h]));
        out.push((p("attn.ln.beta"), vec![h]));
        out.push((p("ffn.in.weight"), vec![h, f]));
        out.push((p("ffn.in.bias"), vec![f]));
        out.push((p("ffn.out.weight"), vec![f, h]));
        out.push((p("ffn.out.bias"), vec![h]));
        out.push((p("ffn.ln.gamma"), vec![h]));
        out.push((p("ffn.ln.beta"), vec![h]));
    }
    if !cfg.tie_mlm {
        out.push(("mlm.weight".into(), vec![cfg.vocab_size, h]));
    }
    out.push(("mlm.bias".into(), vec![cfg.vocab_size]));
    out.push(("rf.weight".into(), vec![h, 2]));
    out.push(("rf.bias".into(), vec![2]));
    out
}

fn init_value(name: &str, shape: &[usize], std: f32, rng: &mut Rng) -> Tensor {
    if name.ends_with(".gamma") {
        Tensor::filled(shape, 1.0)
    } else if name.ends_with(".bias") || name.ends_with(".beta") {
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, std, rng)
    }
}

/// Padded token, type and position ids for a batch of sequences, trimmed to
/// the longest non-PAD length in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub input_ids: Vec<u32>,
    pub type_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
}

impl Batch {
    pub fn from_examples<'a, I: IntoIterator<Item = &'a MaskedExample>>(examples: I) -> Batch {
        let examples: Vec<&MaskedExample> = examples.into_iter().collect();
        let len = examples
            .iter()
            .map(|e| e.seq_len())
            .max()
            .unwrap_or(0)
            .max(1);
        let mut b = Batch {
            size: examples.len(),
            len,
            input_ids: Vec::with_capacity(examples.len() * len),
            type_ids: Vec::with_capacity(examples.len() * len),
            position_ids: Vec::with_capacity(examples.len() * len),
        };
        for e in examples {
            b.input_ids.extend_from_slice(&e.input_ids[..len]);
            b.type_ids.extend_from_slice(&e.type_ids[..len]);
            b.position_ids.extend_from_slice(&e.position_ids[..len]);
        }
        b
    }

    /// One sequence, no padding trimmed.
    pub fn single(input_ids: Vec<u32>, type_ids: Vec<u32>, position_ids: Vec<u32>) -> Batch {
        Batch {
            size: 1,
            len: input_ids.len(),
            input_ids,
            type_ids,
            position_ids,
        }
    }

    pub fn is_pad(&self, flat: usize) -> bool {
        self.input_ids[flat] == PAD
    }

    /// Flat row index of each sequence's first position.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.size).map(|b| b * self.len).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    pub params: ParamSet,
    ids: ParamIds,
    head: Option<TaskHead>,
}

impl Encoder {
    /// Freshly initialized encoder: weights `N(0, init_std²)`, biases 0,
    /// layer-norm gains 1.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in param_layout(&config) {
            let t = init_value(&name, &shape, config.init_std, rng);
            params.add(name, t);
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, EncoderError> {
        config.validate()?;
        for (name, shape) in param_layout(&config) {
            match params.by_name(&name) {
                None => return Err(EncoderError::ParamMismatch(format!("missing {name}"))),
                Some(t) if t.shape != shape => {
                    return Err(EncoderError::ParamMismatch(format!(
                        "{name} has shape {:?}, config implies {shape:?}",
                        t.shape
                    )))
                }
                _ => {}
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let affine = |p: &str| Affine {
            w: id(&format!("{p}.weight")),
            b: id(&format!("{p}.bias")),
        };
        let norm = |p: &str| Norm {
            gamma: id(&format!("{p}.gamma")),
            beta: id(&format!("{p}.beta")),
        };
        let layers = (0..config.layers)
            .map(|l| LayerIds {
                q: affine(&format!("layer.{l}.attn.q")),
                k: affine(&format!("layer.{l}.attn.k")),
                v: affine(&format!("layer.{l}.attn.v")),
                o: affine(&format!("layer.{l}.attn.o")),
                attn_ln: norm(&format!("layer.{l}.attn.ln")),
                ffn_in: affine(&format!("layer.{l}.ffn.in")),
                ffn_out: affine(&format!("layer.{l}.ffn.out")),
                ffn_ln: norm(&format!("layer.{l}.ffn.ln")),
            })
            .collect();
        let ids = ParamIds {
            token: id("emb.token"),
            typ: id("emb.type"),
            position: id("emb.position"),
            emb_ln: norm("emb.ln"),
            layers,
            mlm_weight: (!config.tie_mlm).then(|| id("mlm.weight")),
            mlm_bias: id("mlm.bias"),
            rf: affine("rf"),
        };
        let head = match (params.id("head.weight"), params.id("head.bias")) {
            (Some(w), Some(b)) => {
                let ws = &params.get(w).shape;
                let kind = if params.by_name("head.kind.tagging").is_some() {
                    HeadKind::TokenTagging
                } else {
                    HeadKind::SequenceClassification
                };
                Some(TaskHead {
                    kind,
                    n_out: ws[1],
                    weight: w,
                    bias: b,
                })
            }
            _ => None,
        };
        Ok(Encoder {
            config,
            params,
            ids,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn head(&self) -> Option<TaskHead> {
        self.head
    }

    /// Adds (or replaces) the task head.
    pub fn attach_head(
        &mut self,
        kind: HeadKind,
        n_out: usize,
        rng: &mut Rng,
    ) -> Result<TaskHead, EncoderError> {
        if n_out == 0 {
            return Err(EncoderError::HeadMismatch(
                "head needs at least one output".into(),
            ));
        }
        if let Some(h) = self.head {
            if h.kind == kind && h.n_out == n_out {
                return Ok(h);
            }
            return Err(EncoderError::HeadMismatch(format!(
                "encoder already has a {:?} head with {} outputs",
                h.kind, h.n_out
            )));
        }
        let hdim = self.config.hidden;
        let weight = self.params.add(
            "head.weight",
            Tensor::randn(&[hdim, n_out], self.config.init_std, rng),
        );
        let bias = self.params.add("head.bias", Tensor::zeros(&[n_out]));
        if kind == HeadKind::TokenTagging {
            // Zero-sized marker so a checkpoint records the head kind.
            let mut marker = Tensor::zeros(&[0]);
            marker.requires_grad = false;
            self.params.add("head.kind.tagging", marker);
        }
        let head = TaskHead {
            kind,
            n_out,
            weight,
            bias,
        };
        self.head = Some(head);
        Ok(head)
    }

    fn p<'p>(&'p self, g: &mut Graph<'p>, id: ParamId) -> Var {
        g.param(id, self.params.get(id))
    }

    fn affine<'p>(&'p self, g: &mut Graph<'p>, x: Var, a: Affine) -> Result<Var, TensorError> {
        let w = self.p(g, a.w);
        let b = self.p(g, a.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn norm<'p>(&'p self, g: &mut Graph<'p>, x: Var, n: Norm) -> Result<Var, TensorError> {
        let gamma = self.p(g, n.gamma);
        let beta = self.p(g, n.beta);
        g.layer_norm(x, Some(gamma), Some(beta), self.config.ln_eps)
    }

    fn check_ids(&self, batch: &Batch) -> Result<(), EncoderError> {
        if batch.len > self.config.max_len {
            return Err(EncoderError::TooLong {
                len: batch.len,
                max_len: self.config.max_len,
            });
        }
        let checks: [(&'static str, &[u32], usize); 3] = [
            ("token", &batch.input_ids, self.config.vocab_size),
            ("type", &batch.type_ids, self.config.type_vocab),
            ("position", &batch.position_ids, self.config.max_len),
        ];
        for (table, ids, bound) in checks {
            if let Some(&bad) = ids.iter().find(|&&i| i as usize >= bound) {
                return Err(EncoderError::IdOutOfRange {
                    table,
                    index: bad as usize,
                    bound,
                });
            }
        }
        Ok(())
    }

    /// Sum of token, type and position embeddings, then layer-norm and
    /// dropout. Output `[size·len, hidden]`.
    pub fn embed<'p>(
        &'p self,
        g: &mut Graph<'p>,
        batch: &Batch,
        rng: Option<&mut Rng>,
    ) -> Result<Var, EncoderError> {
        let pre = self.embed_sum(g, batch)?;
        let x = self.norm(g, pre, self.ids.emb_ln)?;
        Ok(self.drop(g, x, rng)?)
    }

    /// The raw embedding sum, before normalization.
    pub fn embed_sum<'p>(&'p self, g: &mut Graph<'p>, batch: &Batch) -> Result<Var, EncoderError> {
        self.check_ids(batch)?;
        let tok = self.p(g, self.ids.token);
        let typ = self.p(g, self.ids.typ);
        let pos = self.p(g, self.ids.position);
        let a = g.embedding(tok, &batch.input_ids)?;
        let b = g.embedding(typ, &batch.type_ids)?;
        let c = g.embedding(pos, &batch.position_ids)?;
        let ab = g.add(a, b)?;
        Ok(g.add(ab, c)?)
    }

    fn drop<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        rng: Option<&mut Rng>,
    ) -> Result<Var, TensorError> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, r),
            _ => Ok(x),
        }
    }

    /// Additive key mask, `[size, heads, len, len]`.
    fn attention_mask(&self, batch: &Batch) -> Tensor {
        let (b, l, nh) = (batch.size, batch.len, self.config.heads);
        let mut data = Vec::with_capacity(b * nh * l * l);
        for s in 0..b {
            let row: Vec<f32> = (0..l)
                .map(|j| {
                    if batch.is_pad(s * l + j) {
                        MASKED_LOGIT
                    } else {
                        0.0
                    }
                })
                .collect();
            for _ in 0..nh * l {
                data.extend_from_slice(&row);
            }
        }
        Tensor::new(vec![b, nh, l, l], data).expect("mask shape")
    }

    /// Runs every layer. `x` is `[size·len, hidden]`; so is the output.
    pub fn encode<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        batch: &Batch,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var, EncoderError> {
        if batch.len > self.config.max_len {
            return Err(EncoderError::TooLong {
                len: batch.len,
                max_len: self.config.max_len,
            });
        }
        let expect = [batch.size * batch.len, self.config.hidden];
        if g.shape(x) != expect {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: g.shape(x).to_vec(),
                rhs: expect.to_vec(),
            }
            .into());
        }
        let mask = g.constant(self.attention_mask(batch));
        let mut h = x;
        for layer in &self.ids.layers {
            h = self.layer(g, h, layer, mask, batch, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    fn split_heads<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        batch: &Batch,
    ) -> Result<Var, TensorError> {
        let nh = self.config.heads;
        let dh = self.config.hidden / nh;
        let r = g.reshape(x, &[batch.size, batch.len, nh, dh])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    fn layer<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        ids: &LayerIds,
        mask: Var,
        batch: &Batch,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var, EncoderError> {
        let dh = self.config.hidden / self.config.heads;
        let q = self.affine(g, x, ids.q)?;
        let k = self.affine(g, x, ids.k)?;
        let v = self.affine(g, x, ids.v)?;
        let q = self.split_heads(g, q, batch)?;
        let k = self.split_heads(g, k, batch)?;
        let v = self.split_heads(g, v, batch)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let scores = g.add(scores, mask)?;
        let probs = g.softmax(scores)?;
        let probs = self.drop(g, probs, rng.as_deref_mut())?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch.size * batch.len, self.config.hidden])?;
        let attn = self.affine(g, ctx, ids.o)?;
        let attn = self.drop(g, attn, rng.as_deref_mut())?;
        let res = g.add(attn, x)?;
        let h = self.norm(g, res, ids.attn_ln)?;

        let f = self.affine(g, h, ids.ffn_in)?;
        let f = g.gelu(f)?;
        let f = self.affine(g, f, ids.ffn_out)?;
        let f = self.drop(g, f, rng)?;
        let res = g.add(f, h)?;
        Ok(self.norm(g, res, ids.ffn_ln)?)
    }

    /// Embedding followed by all layers. `rng` enables dropout.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        batch: &Batch,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var, EncoderError> {
        let x = self.embed(g, batch, rng.as_deref_mut())?;
        self.encode(g, x, batch, rng)
    }

    /// `[n, hidden]` states → `[n, vocab]` logits.
    pub fn mlm_logits<'p>(&'p self, g: &mut Graph<'p>, h: Var) -> Result<Var, EncoderError> {
        let table = match self.ids.mlm_weight {
            Some(w) => self.p(g, w),
            None => self.p(g, self.ids.token),
        };
        let wt = g.transpose(table)?;
        let logits = g.matmul(h, wt)?;
        let bias = self.p(g, self.ids.mlm_bias);
        Ok(g.add(logits, bias)?)
    }

    /// `[n, hidden]` CLS states → `[n, 2]` (fake, real) logits.
    pub fn dlm_real_logits<'p>(
        &'p self,
        g: &mut Graph<'p>,
        h_cls: Var,
    ) -> Result<Var, EncoderError> {
        Ok(self.affine(g, h_cls, self.ids.rf)?)
    }

    /// Task-head logits: `[size, n_out]` for sequence classification from
    /// the CLS rows, `[size·len, n_out]` for tagging.
    pub fn task_logits<'p>(
        &'p self,
        g: &mut Graph<'p>,
        h: Var,
        batch: &Batch,
    ) -> Result<Var, EncoderError> {
        let head = self
            .head
            .ok_or_else(|| EncoderError::HeadMismatch("no task head attached".into()))?;
        let x = match head.kind {
            HeadKind::SequenceClassification => g.gather_rows(h, &batch.cls_rows())?,
            HeadKind::TokenTagging => h,
        };
        let w = self.p(g, head.weight);
        let b = self.p(g, head.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            max_len: 16,
            vocab_size: 20,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn encoder(cfg: ModelConfig) -> Encoder {
        Encoder::new(cfg, &mut substream(1, Stream::Init, 0)).unwrap()
    }

    #[test]
    fn config_checks() {
        let bad = ModelConfig {
            hidden: 130,
            heads: 4,
            vocab_size: 20,
            ..Default::default()
        };
        let p = bad.problems();
        assert_eq!(p.len(), 1);
        assert!(p[0].1.contains("hidden not divisible by heads"));
        assert!(
            ModelConfig {
                vocab_size: 4,
                max_len: 3,
                ..tiny()
            }
            .problems()
            .len()
                == 2
        );
        assert!(ModelConfig::base_scale().problems().is_empty());
        assert_eq!(ModelConfig::base_scale().ffn(), 3072);
    }

    #[test]
    fn parameter_count_is_function_of_config() {
        let cfg = tiny();
        let e = encoder(cfg.clone());
        let want: usize = param_layout(&cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(e.num_parameters(), want);
        let h = 8;
        let per_layer = 4 * (h * h + h) + 2 * h + (h * 32 + 32) + (32 * h + h) + 2 * h;
        assert_eq!(
            want,
            20 * h + 4 * h + 16 * h + 2 * h + 2 * per_layer + 20 + (h * 2 + 2)
        );
        let untied = ModelConfig {
            tie_mlm: false,
            ..cfg
        };
        assert_eq!(encoder(untied).num_parameters(), want + 20 * h);
    }

    #[test]
    fn zero_tables_give_zero_sum() {
        let mut e = encoder(tiny());
        for (name, t) in e.params.tensors_mut() {
            if name.starts_with("emb.") && !name.contains(".ln.") {
                t.data.fill(0.0);
            }
        }
        let batch = Batch::single(vec![2, 7, 3], vec![0, 0, 0], vec![0, 1, 2]);
        let mut g = Graph::new();
        let s = e.embed_sum(&mut g, &batch).unwrap();
        assert!(g.value(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_token_rows_give_one_hot() {
        let mut e = encoder(tiny());
        for (name, t) in e.params.tensors_mut() {
            match name {
                "emb.token" => {
                    t.data.fill(0.0);
                    for r in 0..8 {
                        t.data[r * 8 + r] = 1.0;
                    }
                }
                "emb.type" | "emb.position" => t.data.fill(0.0),
                _ => {}
            }
        }
        let ids = vec![2, 5, 7, 3];
        let batch = Batch::single(ids.clone(), vec![0; 4], vec![0, 1, 2, 3]);
        let mut g = Graph::new();
        let s = e.embed_sum(&mut g, &batch).unwrap();
        for (i, row) in g.value(s).chunks(8).enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if j == ids[i] as usize { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn type_ids_shift_by_row_difference() {
        let e = encoder(tiny());
        let a = Batch::single(vec![2, 6, 3], vec![0, 0, 0], vec![0, 1, 2]);
        let b = Batch::single(vec![2, 6, 3], vec![0, 3, 0], vec![0, 1, 2]);
        let mut g = Graph::new();
        let sa = e.embed_sum(&mut g, &a).unwrap();
        let sb = e.embed_sum(&mut g, &b).unwrap();
        let typ = &e.params.by_name("emb.type").unwrap().data;
        for j in 0..8 {
            let diff = g.value(sb)[8 + j] - g.value(sa)[8 + j];
            let want = typ[3 * 8 + j] - typ[j];
            assert!((diff - want).abs() < 1e-6);
            assert_eq!(g.value(sa)[j], g.value(sb)[j]);
        }
    }

    #[test]
    fn out_of_range_ids_name_table() {
        let e = encoder(tiny());
        let mut g = Graph::new();
        let err = e
            .forward(
                &mut g,
                &Batch::single(vec![2, 25], vec![0, 0], vec![0, 1]),
                None,
            )
            .unwrap_err();
        assert!(matches!(
            err,
            EncoderError::IdOutOfRange {
                table: "token",
                index: 25,
                ..
            }
        ));
        let err = e
            .forward(
                &mut g,
                &Batch::single(vec![2, 5], vec![0, 4], vec![0, 1]),
                None,
            )
            .unwrap_err();
        assert!(matches!(
            err,
            EncoderError::IdOutOfRange { table: "type", .. }
        ));
        let err = e
            .forward(
                &mut g,
                &Batch::single(vec![2, 5], vec![0, 0], vec![0, 16]),
                None,
            )
            .unwrap_err();
        assert!(matches!(
            err,
            EncoderError::IdOutOfRange {
                table: "position",
                ..
            }
        ));
        let long = Batch::single(vec![5; 17], vec![0; 17], (0..17).collect());
        assert!(matches!(
            e.forward(&mut g, &long, None),
            Err(EncoderError::TooLong { .. })
        ));
    }

    #[test]
    fn zero_hidden_gives_uniform_mlm() {
        let e = encoder(tiny());
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[2, 8]));
        let logits = e.mlm_logits(&mut g, h).unwrap();
        let p = g.softmax(logits).unwrap();
        assert!(g.value(p).iter().all(|&x| (x - 1.0 / 20.0).abs() < 1e-7));
    }

    #[test]
    fn mlm_head_is_tied_to_token_table() {
        let mut e = encoder(tiny());
        let mut g0 = Graph::new();
        let hv = Tensor::randn(&[1, 8], 1.0, &mut substream(3, Stream::Eval, 0));
        let h = g0.constant(hv.clone());
        let l0 = e.mlm_logits(&mut g0, h).unwrap();
        let before = g0.value(l0).to_vec();
        drop(g0);
        let tok = e.params.id("emb.token").unwrap();
        for j in 0..8 {
            e.params.get_mut(tok).data[7 * 8 + j] += 0.5;
        }
        let mut g1 = Graph::new();
        let h = g1.constant(hv);
        let l1 = e.mlm_logits(&mut g1, h).unwrap();
        let after = g1.value(l1).to_vec();
        for t in 0..20 {
            if t == 7 {
                assert_ne!(before[t], after[t]);
            } else {
                assert_eq!(before[t], after[t]);
            }
        }
    }

    #[test]
    fn real_fake_head_closed_form() {
        let mut e = encoder(tiny());
        let c = 1.3f32;
        let b = e.params.id("rf.bias").unwrap();
        e.params.get_mut(b).data = vec![0.0, c];
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[1, 8]));
        let l = e.dlm_real_logits(&mut g, h).unwrap();
        let p = g.softmax(l).unwrap();
        let real = g.value(p)[1];
        assert!((real - c.exp() / (1.0 + c.exp())).abs() < 1e-6);
    }

    #[test]
    fn pad_keys_get_zero_attention() {
        let e = encoder(tiny());
        let batch = Batch::single(vec![2, 6, 3, PAD, PAD], vec![0; 5], (0..5).collect());
        let mask = e.attention_mask(&batch);
        let mut g = Graph::new();
        let m = g.constant(mask);
        let scores = g.constant(Tensor::randn(
            &[1, 2, 5, 5],
            1.0,
            &mut substream(0, Stream::Eval, 1),
        ));
        let s = g.add(scores, m).unwrap();
        let p = g.softmax(s).unwrap();
        for row in g.value(p).chunks(5) {
            assert_eq!(row[3], 0.0);
            assert_eq!(row[4], 0.0);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pad_positions_do_not_change_real_outputs() {
        let e = encoder(tiny());
        let short = Batch::single(vec![2, 6, 9, 3], vec![0; 4], (0..4).collect());
        let padded = Batch::single(vec![2, 6, 9, 3, PAD, PAD], vec![0; 6], (0..6).collect());
        let mut g = Graph::new();
        let a = e.forward(&mut g, &short, None).unwrap();
        let b = e.forward(&mut g, &padded, None).unwrap();
        assert_eq!(g.value(a), &g.value(b)[..32]);
    }

    #[test]
    fn single_position_attention_is_identity_on_values() {
        // one token: softmax over one key is 1, so the context equals V x.
        let mut e = encoder(ModelConfig {
            layers: 1,
            ..tiny()
        });
        for (name, t) in e.params.tensors_mut() {
            if name.contains("ffn.") && !name.contains(".ln.") {
                t.data.fill(0.0);
            }
            if name.contains("attn.v.weight") || name.contains("attn.o.weight") {
                t.data.fill(0.0);
                for r in 0..8 {
                    t.data[r * 8 + r] = 1.0;
                }
            }
        }
        let batch = Batch::single(vec![7], vec![0], vec![0]);
        let mut g = Graph::new();
        let x = e.embed(&mut g, &batch, None).unwrap();
        let xv = g.value(x).to_vec();
        let out = e.encode(&mut g, x, &batch, None).unwrap();
        // attn = x, so first LN sees 2x and returns LN(x); zero FFN leaves it.
        let mut g2 = Graph::new();
        let xc =
            g2.constant(Tensor::new(vec![1, 8], xv.iter().map(|v| 2.0 * v).collect()).unwrap());
        let want = g2.layer_norm(xc, None, None, 1e-12).unwrap();
        let want2 = g2.layer_norm(want, None, None, 1e-12).unwrap();
        for (a, b) in g.value(out).iter().zip(g2.value(want2)) {
            assert!((a - b).abs() < 1e-5, "{a} {b}");
        }
    }

    #[test]
    fn heads_attach_and_mismatch() {
        let mut e = encoder(tiny());
        let mut rng = substream(0, Stream::Init, 9);
        let batch = Batch::single(vec![2, 6, 3], vec![0; 3], (0..3).collect());
        {
            let mut g = Graph::new();
            let h = e.forward(&mut g, &batch, None).unwrap();
            assert!(matches!(
                e.task_logits(&mut g, h, &batch),
                Err(EncoderError::HeadMismatch(_))
            ));
        }
        e.attach_head(HeadKind::SequenceClassification, 3, &mut rng)
            .unwrap();
        assert!(e.attach_head(HeadKind::TokenTagging, 5, &mut rng).is_err());
        let mut g = Graph::new();
        let h = e.forward(&mut g, &batch, None).unwrap();
        let l = e.task_logits(&mut g, h, &batch).unwrap();
        assert_eq!(g.shape(l), &[1, 3]);
    }
}
