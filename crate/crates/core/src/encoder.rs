//! Pre-layer-norm bidirectional transformer with regression, projection and
//! masked-token heads.
//!
//! All sequences of a batch are stacked into one `(B * L) x d` matrix; the
//! attention block slices out each sequence and head. Pad keys are masked
//! with `-inf` before the softmax, so pad content never reaches unmasked
//! positions.

use std::collections::BTreeMap;
use std::path::Path;

use numerics::{Checkpoint, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tokenizer::{SectionCode, TokenSequence};

const LN_EPS: f64 = 1e-5;
/// Weights are drawn from `N(0, (INIT_GAIN / sqrt(fan_in))^2)`; embedding
/// tables use `d_model` as fan-in.
const INIT_GAIN: f64 = 0.5;
const FORMAT: &str = "adsorbtext-encoder";

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub d_graph: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            max_len: 128,
            vocab_size,
            dropout: 0.1,
            d_graph: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("d_graph", self.d_graph),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Precondition(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Precondition(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Precondition(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("d_graph", self.d_graph.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &'static str) -> Result<T> {
            let raw = kv.get(key).ok_or(Error::MissingField(key))?;
            raw.parse()
                .map_err(|_| Error::invalid(key, format!("cannot parse `{raw}`")))
        }
        let cfg = Self {
            d_model: get(kv, "d_model")?,
            n_heads: get(kv, "n_heads")?,
            n_layers: get(kv, "n_layers")?,
            d_ff: get(kv, "d_ff")?,
            max_len: get(kv, "max_len")?,
            vocab_size: get(kv, "vocab_size")?,
            dropout: get(kv, "dropout")?,
            d_graph: get(kv, "d_graph")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    inits: Vec<Init>,
    tok: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    reg_w1: usize,
    reg_b1: usize,
    reg_w2: usize,
    reg_b2: usize,
    proj_w: usize,
    proj_b: usize,
    mlm_w: usize,
    mlm_b: usize,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, shape: [usize; 2], init: Init) -> usize {
        self.names.push(name.into());
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }
}

impl Layout {
    fn new(c: &EncoderConfig) -> Self {
        use Init::*;
        let d = c.d_model;
        let std = |fan_in: usize| Normal(INIT_GAIN / (fan_in as f64).sqrt());
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let tok = b.add("embeddings.token", [c.vocab_size, d], std(d));
        let pos = b.add("embeddings.position", [c.max_len, d], std(d));
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = |n: &str| format!("layers.{l}.{n}");
                LayerIdx {
                    ln1_g: b.add(p("ln1.gain"), [1, d], Ones),
                    ln1_b: b.add(p("ln1.bias"), [1, d], Zeros),
                    wq: b.add(p("attn.query.weight"), [d, d], std(d)),
                    bq: b.add(p("attn.query.bias"), [1, d], Zeros),
                    wk: b.add(p("attn.key.weight"), [d, d], std(d)),
                    bk: b.add(p("attn.key.bias"), [1, d], Zeros),
                    wv: b.add(p("attn.value.weight"), [d, d], std(d)),
                    bv: b.add(p("attn.value.bias"), [1, d], Zeros),
                    wo: b.add(p("attn.output.weight"), [d, d], std(d)),
                    bo: b.add(p("attn.output.bias"), [1, d], Zeros),
                    ln2_g: b.add(p("ln2.gain"), [1, d], Ones),
                    ln2_b: b.add(p("ln2.bias"), [1, d], Zeros),
                    ff1_w: b.add(p("ff.in.weight"), [d, c.d_ff], std(d)),
                    ff1_b: b.add(p("ff.in.bias"), [1, c.d_ff], Zeros),
                    ff2_w: b.add(p("ff.out.weight"), [c.d_ff, d], std(c.d_ff)),
                    ff2_b: b.add(p("ff.out.bias"), [1, d], Zeros),
                }
            })
            .collect();
        let lnf_g = b.add("final_ln.gain", [1, d], Ones);
        let lnf_b = b.add("final_ln.bias", [1, d], Zeros);
        let reg_w1 = b.add("head.regression.dense.weight", [d, d], std(d));
        let reg_b1 = b.add("head.regression.dense.bias", [1, d], Zeros);
        let reg_w2 = b.add("head.regression.out.weight", [d, 1], std(d));
        let reg_b2 = b.add("head.regression.out.bias", [1, 1], Zeros);
        let proj_w = b.add("head.projection.weight", [d, c.d_graph], std(d));
        let proj_b = b.add("head.projection.bias", [1, c.d_graph], Zeros);
        let mlm_w = b.add("head.mlm.weight", [d, c.vocab_size], std(d));
        let mlm_b = b.add("head.mlm.bias", [1, c.vocab_size], Zeros);
        Self {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            reg_w1,
            reg_b1,
            reg_w2,
            reg_b2,
            proj_w,
            proj_b,
            mlm_w,
            mlm_b,
        }
    }

    fn is_encoder_body(&self, i: usize) -> bool {
        i < self.reg_w1
    }

    fn regression_head(&self) -> [usize; 4] {
        [self.reg_w1, self.reg_b1, self.reg_w2, self.reg_b2]
    }
}

fn init_tensor(shape: [usize; 2], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(&shape),
        Init::Ones => Tensor::full(&shape, 1.0),
        Init::Normal(std) => {
            let normal = Normal::new(0.0, std).expect("valid std");
            let data = (0..shape[0] * shape[1]).map(|_| normal.sample(rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        }
    }
}

/// Final-layer attention of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// One `L x L` matrix per head; row `i` is the distribution of query `i`.
    pub heads: Vec<Tensor>,
    pub sections: Vec<SectionCode>,
    pub attention_mask: Vec<bool>,
}

/// Graph nodes produced by one batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `(B * L) x d_model`, sequence-major.
    pub hidden: Var,
    pub batch: usize,
    pub seq_len: usize,
    /// Final-layer attention, index `b * n_heads + h`, each `L x L`.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    layout: Layout,
    params: Vec<Tensor>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Log of the contrastive temperature.
    pub log_tau: f64,
    pub vocab_hash: Option<String>,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(&s, &i)| init_tensor(s, i, &mut rng))
            .collect();
        Ok(Self {
            config,
            layout,
            params,
            target_mean: 0.0,
            target_std: 1.0,
            log_tau: 0.07f64.ln(),
            vocab_hash: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layout
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    /// Redraw the regression head from `seed`.
    pub fn reset_regression_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in self.layout.regression_head() {
            self.params[i] = init_tensor(self.layout.shapes[i], self.layout.inits[i], &mut rng);
        }
    }

    pub fn zero_regression_head(&mut self) {
        for i in self.layout.regression_head() {
            self.params[i] = Tensor::zeros(&self.layout.shapes[i]);
        }
    }

    /// Copy embeddings, transformer layers and final norm from `other`.
    pub fn load_encoder_body(&mut self, other: &EncoderModel) -> Result<()> {
        let (a, b) = (&self.config, &other.config);
        if (a.d_model, a.n_heads, a.n_layers, a.d_ff, a.max_len, a.vocab_size)
            != (b.d_model, b.n_heads, b.n_layers, b.d_ff, b.max_len, b.vocab_size)
        {
            return Err(Error::Incompatible(format!(
                "encoder shapes differ: {:?} vs {:?}",
                a.to_kv(),
                b.to_kv()
            )));
        }
        for i in 0..self.params.len() {
            if self.layout.is_encoder_body(i) {
                self.params[i] = other.params[i].clone();
            }
        }
        Ok(())
    }

    /// Every parameter as a trainable leaf, in `param_names` order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Every parameter as a constant leaf.
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    fn check_sequence(&self, t: &TokenSequence) -> Result<()> {
        if t.len() > self.config.max_len {
            return Err(Error::Precondition(format!(
                "sequence length {} exceeds max_len {}",
                t.len(),
                self.config.max_len
            )));
        }
        if t.attention_mask.len() != t.len() || t.attention_mask.first() != Some(&true) {
            return Err(Error::Precondition(format!(
                "sequence `{}` has an inconsistent attention mask",
                t.system_id
            )));
        }
        if let Some(&id) = t.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange(id, self.config.vocab_size));
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let shape = g.value(x).shape().to_vec();
                let keep = 1.0 / (1.0 - p);
                let n = shape.iter().product();
                let mask = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                Ok(g.mul_const(x, Tensor::new(shape, mask)?)?)
            }
            _ => Ok(x),
        }
    }

    fn affine_norm(&self, g: &mut Graph, p: &[Var], x: Var, gain: usize, bias: usize) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.mul_row(n, p[gain])?;
        Ok(g.add_row(n, p[bias])?)
    }

    fn linear(&self, g: &mut Graph, p: &[Var], x: Var, w: usize, b: usize) -> Result<Var> {
        let y = g.matmul(x, p[w])?;
        Ok(g.add_row(y, p[b])?)
    }

    /// Run the stack over the first `seq_len` positions of each sequence.
    ///
    /// Positions past `seq_len` must be padding. Passing a dropout stream
    /// enables dropout on the embedding and both residual branches.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        seqs: &[&TokenSequence],
        seq_len: usize,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let c = &self.config;
        if p.len() != self.params.len() {
            return Err(Error::Precondition(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                p.len()
            )));
        }
        if seqs.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let l = seq_len;
        let mut ids = Vec::with_capacity(seqs.len() * l);
        let mut positions = Vec::with_capacity(seqs.len() * l);
        let mut key_masks = Vec::with_capacity(seqs.len());
        for t in seqs {
            self.check_sequence(t)?;
            if l == 0 || l > t.len() || t.attention_mask[l..].iter().any(|&m| m) {
                return Err(Error::Precondition(format!(
                    "seq_len {l} cuts into the unmasked part of `{}`",
                    t.system_id
                )));
            }
            ids.extend_from_slice(&t.ids[..l]);
            positions.extend(0..l);
            let mut m = Vec::with_capacity(l * l);
            for _ in 0..l {
                m.extend(t.attention_mask[..l].iter().map(|&a| !a));
            }
            key_masks.push(m);
        }

        let tok = g.gather_rows(p[self.layout.tok], &ids)?;
        let pos = g.gather_rows(p[self.layout.pos], &positions)?;
        let x0 = g.add(tok, pos)?;
        let mut x = self.dropout(g, x0, dropout.as_deref_mut())?;

        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::new();
        for (li, ly) in self.layout.layers.iter().enumerate() {
            let last = li + 1 == self.layout.layers.len();
            let h = self.affine_norm(g, p, x, ly.ln1_g, ly.ln1_b)?;
            let q = self.linear(g, p, h, ly.wq, ly.bq)?;
            let q = g.scale(q, scale)?;
            let k = self.linear(g, p, h, ly.wk, ly.bk)?;
            let v = self.linear(g, p, h, ly.wv, ly.bv)?;
            let mut seq_out = Vec::with_capacity(seqs.len());
            for (b, mask) in key_masks.iter().enumerate() {
                let rows = b * l..(b + 1) * l;
                let mut head_out = Vec::with_capacity(c.n_heads);
                for hh in 0..c.n_heads {
                    let cols = hh * dh..(hh + 1) * dh;
                    let qs = g.slice(q, rows.clone(), cols.clone())?;
                    let ks = g.slice(k, rows.clone(), cols.clone())?;
                    let vs = g.slice(v, rows.clone(), cols)?;
                    let kt = g.transpose(ks)?;
                    let scores = g.matmul(qs, kt)?;
                    let scores = g.masked_fill(scores, mask, f64::NEG_INFINITY)?;
                    let probs = g.softmax(scores)?;
                    if last {
                        attention.push(probs);
                    }
                    head_out.push(g.matmul(probs, vs)?);
                }
                seq_out.push(if head_out.len() == 1 {
                    head_out[0]
                } else {
                    g.concat(&head_out, 1)?
                });
            }
            let merged = if seq_out.len() == 1 {
                seq_out[0]
            } else {
                g.concat(&seq_out, 0)?
            };
            let o = self.linear(g, p, merged, ly.wo, ly.bo)?;
            let o = self.dropout(g, o, dropout.as_deref_mut())?;
            x = g.add(x, o)?;

            let h2 = self.affine_norm(g, p, x, ly.ln2_g, ly.ln2_b)?;
            let f = self.linear(g, p, h2, ly.ff1_w, ly.ff1_b)?;
            let f = g.gelu(f)?;
            let f = self.linear(g, p, f, ly.ff2_w, ly.ff2_b)?;
            let f = self.dropout(g, f, dropout.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        let hidden = self.affine_norm(g, p, x, self.layout.lnf_g, self.layout.lnf_b)?;
        Ok(Forward {
            hidden,
            batch: seqs.len(),
            seq_len: l,
            attention,
        })
    }

    /// `<s>` rows of a batch, `B x d_model`.
    pub fn cls_rows(&self, g: &mut Graph, f: &Forward) -> Result<Var> {
        let rows: Vec<usize> = (0..f.batch).map(|b| b * f.seq_len).collect();
        Ok(g.gather_rows(f.hidden, &rows)?)
    }

    /// Raw (normalized-scale) regression output, `B x 1`.
    pub fn regression_head(&self, g: &mut Graph, p: &[Var], cls: Var) -> Result<Var> {
        let h = self.linear(g, p, cls, self.layout.reg_w1, self.layout.reg_b1)?;
        let h = g.tanh(h)?;
        self.linear(g, p, h, self.layout.reg_w2, self.layout.reg_b2)
    }

    pub fn projection_head(&self, g: &mut Graph, p: &[Var], cls: Var) -> Result<Var> {
        self.linear(g, p, cls, self.layout.proj_w, self.layout.proj_b)
    }

    pub fn mlm_head(&self, g: &mut Graph, p: &[Var], hidden: Var) -> Result<Var> {
        self.linear(g, p, hidden, self.layout.mlm_w, self.layout.mlm_b)
    }

    fn inference_graph() -> Graph {
        Graph::new().with_finiteness_check(false)
    }

    /// Hidden states `L x d_model` and final-layer attention of one sequence.
    pub fn encode_tokens(&self, t: &TokenSequence) -> Result<(Tensor, AttentionRecord)> {
        let mut g = Self::inference_graph();
        let p = self.bind_constant(&mut g);
        let f = self.forward(&mut g, &p, &[t], t.len(), None)?;
        let record = AttentionRecord {
            heads: f.attention.iter().map(|&a| g.value(a).clone()).collect(),
            sections: t.sections.clone(),
            attention_mask: t.attention_mask.clone(),
        };
        Ok((g.value(f.hidden).clone(), record))
    }

    /// De-normalized energy predictions, one per sequence.
    pub fn predict_batch(&self, seqs: &[&TokenSequence]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Self::inference_graph();
        let p = self.bind_constant(&mut g);
        let f = self.forward(&mut g, &p, seqs, used_len(seqs), None)?;
        let cls = self.cls_rows(&mut g, &f)?;
        let out = self.regression_head(&mut g, &p, cls)?;
        Ok(g.value(out).data().iter().map(|r| self.denormalize(*r)).collect())
    }

    pub fn predict_energy(&self, t: &TokenSequence) -> Result<f64> {
        Ok(self.predict_batch(&[t])?[0])
    }

    pub fn denormalize(&self, raw: f64) -> f64 {
        raw * self.target_std + self.target_mean
    }

    pub fn normalize(&self, label: f64) -> f64 {
        (label - self.target_mean) / self.target_std
    }

    pub fn project_text(&self, t: &TokenSequence) -> Result<Vec<f64>> {
        let mut g = Self::inference_graph();
        let p = self.bind_constant(&mut g);
        let f = self.forward(&mut g, &p, &[t], used_len(&[t]), None)?;
        let cls = self.cls_rows(&mut g, &f)?;
        let out = self.projection_head(&mut g, &p, cls)?;
        Ok(g.value(out).data().to_vec())
    }

    /// `<s>` embeddings, one row per sequence.
    pub fn cls_embeddings(&self, seqs: &[&TokenSequence]) -> Result<Vec<Vec<f64>>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Self::inference_graph();
        let p = self.bind_constant(&mut g);
        let f = self.forward(&mut g, &p, seqs, used_len(seqs), None)?;
        let cls = self.cls_rows(&mut g, &f)?;
        let v = g.value(cls);
        Ok((0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect())
    }

    /// Masked-token logits, `L x vocab_size`.
    pub fn mlm_logits(&self, t: &TokenSequence) -> Result<Tensor> {
        let mut g = Self::inference_graph();
        let p = self.bind_constant(&mut g);
        let f = self.forward(&mut g, &p, &[t], t.len(), None)?;
        let out = self.mlm_head(&mut g, &p, f.hidden)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = self.config.to_kv();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("target_mean".into(), format!("{:?}", self.target_mean));
        meta.insert("target_std".into(), format!("{:?}", self.target_std));
        meta.insert("log_tau".into(), format!("{:?}", self.log_tau));
        if let Some(h) = &self.vocab_hash {
            meta.insert("vocab_hash".into(), h.clone());
        }
        Checkpoint {
            meta,
            tensors: self
                .layout
                .names
                .iter()
                .cloned()
                .zip(self.params.iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Incompatible("not an encoder checkpoint".into()));
        }
        let config = EncoderConfig::from_kv(&ck.meta)?;
        let float = |key: &'static str| -> Result<f64> {
            let raw = ck.meta.get(key).ok_or(Error::MissingField(key))?;
            raw.parse()
                .map_err(|_| Error::invalid(key, format!("cannot parse `{raw}`")))
        };
        let layout = Layout::new(&config);
        let mut params = Vec::with_capacity(layout.names.len());
        for (name, shape) in layout.names.iter().zip(&layout.shapes) {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Incompatible(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            params.push(t.clone());
        }
        Ok(Self {
            config,
            layout,
            params,
            target_mean: float("target_mean")?,
            target_std: float("target_std")?,
            log_tau: float("log_tau")?,
            vocab_hash: ck.meta.get("vocab_hash").cloned(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write_atomic(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Refuse sequences encoded with a different vocabulary.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        match &self.vocab_hash {
            Some(h) if h != vocab_hash => Err(Error::Incompatible(format!(
                "model vocabulary {h} does not match {vocab_hash}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Row 0 of a hidden-state matrix.
pub fn cls_embedding(hidden: &Tensor) -> Vec<f64> {
    hidden.row_slice(0).to_vec()
}

/// Longest unmasked prefix in a batch; everything after it is padding.
pub fn used_len(seqs: &[&TokenSequence]) -> usize {
    seqs.iter()
        .map(|t| t.attention_mask.iter().rposition(|&m| m).map_or(1, |i| i + 1))
        .max()
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, PAD};

    fn small(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_len: 10,
            vocab_size: vocab,
            dropout: 0.0,
            d_graph: 6,
        }
    }

    fn seq(ids: &[usize], len: usize) -> TokenSequence {
        let mut all = ids.to_vec();
        all.resize(len, PAD);
        TokenSequence {
            system_id: "s".into(),
            attention_mask: (0..len).map(|i| i < ids.len()).collect(),
            sections: (0..len)
                .map(|i| match i {
                    0 => SectionCode::SelfToken,
                    _ if i < ids.len() => SectionCode::Adsorbate,
                    _ => SectionCode::Pad,
                })
                .collect(),
            ids: all,
            label: None,
            truncated: false,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(9);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.d_ff = 0;
        assert!(c.validate().is_err());
        assert_eq!(EncoderConfig::from_kv(&small(9).to_kv()).unwrap(), small(9));
    }

    #[test]
    fn shapes_and_attention_rows() {
        let m = EncoderModel::new(small(9), 1).unwrap();
        let t = seq(&[BOS, 5, 6, 7], 10);
        let (h, att) = m.encode_tokens(&t).unwrap();
        assert_eq!(h.shape(), &[10, 8]);
        assert_eq!(att.heads.len(), 2);
        for a in &att.heads {
            for r in 0..10 {
                let row = a.row_slice(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[4..].iter().all(|&x| x == 0.0));
            }
        }
        assert_eq!(cls_embedding(&h), h.row_slice(0).to_vec());
        assert_eq!(m.mlm_logits(&t).unwrap().shape(), &[10, 9]);
        assert_eq!(m.project_text(&t).unwrap().len(), 6);
    }

    #[test]
    fn out_of_range_token() {
        let m = EncoderModel::new(small(9), 1).unwrap();
        let err = m.encode_tokens(&seq(&[BOS, 9], 10)).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange(9, 9)));
        assert!(m.encode_tokens(&seq(&[BOS, 5], 11)).is_err());
    }

    #[test]
    fn zero_head_predicts_mean() {
        let mut m = EncoderModel::new(small(9), 3).unwrap();
        m.zero_regression_head();
        m.target_mean = -0.75;
        m.target_std = 2.0;
        for ids in [[BOS, 5, 6], [BOS, 8, 8]] {
            assert_eq!(m.predict_energy(&seq(&ids, 10)).unwrap(), -0.75);
        }
    }

    #[test]
    fn batched_prediction_matches_single() {
        let m = EncoderModel::new(small(9), 4).unwrap();
        let a = seq(&[BOS, 5, 6], 10);
        let b = seq(&[BOS, 7, 8, 5, 6, 7], 10);
        let both = m.predict_batch(&[&a, &b]).unwrap();
        assert_eq!(both[0], m.predict_energy(&a).unwrap());
        assert_eq!(both[1], m.predict_energy(&b).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = EncoderModel::new(small(9), 5).unwrap();
        m.target_mean = 0.1;
        m.target_std = 0.3;
        m.vocab_hash = Some("abc".into());
        let back = EncoderModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!((back.target_mean, back.target_std, back.log_tau), (0.1, 0.3, m.log_tau));
        assert!(back.check_vocab("abc").is_ok());
        assert!(back.check_vocab("abd").is_err());
    }

    #[test]
    fn body_transfer_keeps_own_heads() {
        let src = EncoderModel::new(small(9), 6).unwrap();
        let mut dst = EncoderModel::new(small(9), 7).unwrap();
        dst.load_encoder_body(&src).unwrap();
        assert_eq!(dst.param("embeddings.token"), src.param("embeddings.token"));
        assert_ne!(
            dst.param("head.regression.dense.weight"),
            src.param("head.regression.dense.weight")
        );
        let mut other = small(9);
        other.d_model = 4;
        let mut bad = EncoderModel::new(other, 1).unwrap();
        assert!(bad.load_encoder_body(&src).is_err());
    }
}
