//! Contrastive text-graph pretraining, dynamic-mask MLM pretraining and
//! supervised energy fine-tuning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use numerics::{AdamW, Graph, OptimizerState, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{used_len, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::graphemb::GraphEmbeddingSet;
use crate::tokenizer::{apply_dynamic_mask, MaskedBatch, TokenSequence};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Self::Mse),
            "mae" => Ok(Self::Mae),
            _ => Err(Error::invalid("loss", format!("expected mse or mae, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Mae => "mae",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mask_rate: f64,
    pub tau_init: f64,
    pub tau_learnable: bool,
    pub loss: LossKind,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            mask_rate: 0.15,
            tau_init: 0.07,
            tau_learnable: true,
            loss: LossKind::Mse,
            max_steps: None,
        }
    }
}

fn parse<T: FromStr>(key: &'static str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(key, format!("cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Precondition("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Precondition(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Precondition(format!(
                "mask_rate must be in (0, 1), got {}",
                self.mask_rate
            )));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(Error::Precondition(format!(
                "tau_init must be in [{TAU_MIN}, {TAU_MAX}], got {}",
                self.tau_init
            )));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Precondition("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Set one field from its textual form; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse("batch_size", value)?,
            "epochs" => self.epochs = parse("epochs", value)?,
            "lr" => self.lr = parse("lr", value)?,
            "beta1" => self.beta1 = parse("beta1", value)?,
            "beta2" => self.beta2 = parse("beta2", value)?,
            "eps" => self.eps = parse("eps", value)?,
            "weight_decay" => self.weight_decay = parse("weight_decay", value)?,
            "seed" => self.seed = parse("seed", value)?,
            "mask_rate" => self.mask_rate = parse("mask_rate", value)?,
            "tau_init" => self.tau_init = parse("tau_init", value)?,
            "tau_learnable" => self.tau_learnable = parse("tau_learnable", value)?,
            "loss" => self.loss = value.trim().parse()?,
            "max_steps" => {
                self.max_steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse("max_steps", v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("seed", self.seed.to_string()),
            ("mask_rate", format!("{:?}", self.mask_rate)),
            ("tau_init", format!("{:?}", self.tau_init)),
            ("tau_learnable", self.tau_learnable.to_string()),
            ("loss", self.loss.to_string()),
            ("max_steps", self.max_steps.map_or("none".into(), |s| s.to_string())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

impl EncoderConfig {
    /// Set one field from its textual form; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse("d_model", value)?,
            "n_heads" => self.n_heads = parse("n_heads", value)?,
            "n_layers" => self.n_layers = parse("n_layers", value)?,
            "d_ff" => self.d_ff = parse("d_ff", value)?,
            "max_len" => self.max_len = parse("max_len", value)?,
            "dropout" => self.dropout = parse("dropout", value)?,
            "d_graph" => self.d_graph = parse("d_graph", value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub epoch: usize,
    /// Optimizer steps taken when the entry was recorded.
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub mae: Option<f64>,
}

pub fn log_csv(entries: &[LogEntry]) -> String {
    let mut out = String::from("epoch,split,loss,mae\n");
    for e in entries {
        let mae = e.mae.map_or(String::new(), |m| format!("{m:?}"));
        let _ = writeln!(out, "{},{},{:?},{}", e.epoch, e.split, e.loss, mae);
    }
    out
}

/// Where a training run takes its weights from.
#[derive(Debug, Clone, Copy)]
pub enum ModelInit<'a> {
    Fresh(&'a EncoderConfig),
    /// Encoder body copied from a checkpoint; heads are freshly drawn.
    Pretrained(&'a EncoderModel),
}

impl ModelInit<'_> {
    fn build(self, seed: u64) -> Result<EncoderModel> {
        match self {
            Self::Fresh(c) => EncoderModel::new(c.clone(), seed),
            Self::Pretrained(m) => {
                let mut fresh = EncoderModel::new(m.config().clone(), seed)?;
                fresh.load_encoder_body(m)?;
                fresh.vocab_hash = m.vocab_hash.clone();
                Ok(fresh)
            }
        }
    }
}

/// Population mean and standard deviation; std falls back to 1 for constant labels.
pub fn target_normalization(labels: &[f64]) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::Precondition("no labels to normalize".into()));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Ok((labels[0], 1.0));
    }
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok((mean, if std > 0.0 { std } else { 1.0 }))
}

/// Both directions of the symmetric InfoNCE objective.
///
/// `text` is `N x D`; `graph` enters as a constant so no gradient reaches it.
/// Returns `(text -> graph, graph -> text)` mean cross-entropies.
pub fn contrastive_terms(g: &mut Graph, text: Var, graph: &Tensor, log_tau: Var) -> Result<(Var, Var)> {
    let n = g.value(text).rows();
    if n == 0 || graph.shape() != g.value(text).shape() {
        return Err(Error::Precondition(format!(
            "text {:?} and graph {:?} embeddings must be equal, nonempty shapes",
            g.value(text).shape(),
            graph.shape()
        )));
    }
    let gr = g.constant(graph.clone());
    let tn = g.normalize_rows(text)?;
    let gn = g.normalize_rows(gr)?;
    let gt = g.transpose(gn)?;
    // sim[i][j] = cos(T_i, G_j)
    let sim = g.matmul(tn, gt)?;
    let neg = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(neg)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let term = |g: &mut Graph, l: Var| -> Result<Var> {
        let ls = g.log_softmax(l)?;
        let picked = g.pick(ls, &diag)?;
        let m = g.mean(picked)?;
        Ok(g.scale(m, -1.0)?)
    };
    let t2g = term(g, logits)?;
    let lt = g.transpose(logits)?;
    let g2t = term(g, lt)?;
    Ok((t2g, g2t))
}

pub fn contrastive_loss(g: &mut Graph, text: Var, graph: &Tensor, log_tau: Var) -> Result<Var> {
    let (a, b) = contrastive_terms(g, text, graph, log_tau)?;
    Ok(g.add(a, b)?)
}

/// Loss value for fixed embeddings and temperature.
pub fn contrastive_loss_value(text: &Tensor, graph: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Precondition(format!("temperature must be positive, got {tau}")));
    }
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let lt = g.constant(Tensor::scalar(tau.ln()));
    let l = contrastive_loss(&mut g, t, graph, lt)?;
    Ok(g.value(l).item()?)
}

/// Mean cross-entropy over labeled rows; `None` when no row is labeled.
pub fn mlm_loss(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Option<Var>> {
    if targets.len() != g.value(logits).rows() {
        return Err(Error::Precondition(format!(
            "{} targets for {} logit rows",
            targets.len(),
            g.value(logits).rows()
        )));
    }
    let (rows, cols): (Vec<usize>, Vec<usize>) = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|c| (i, c)))
        .unzip();
    if rows.is_empty() {
        return Ok(None);
    }
    let ls = g.log_softmax(logits)?;
    let sel = g.gather_rows(ls, &rows)?;
    let picked = g.pick(sel, &cols)?;
    let m = g.mean(picked)?;
    Ok(Some(g.scale(m, -1.0)?))
}

pub fn regression_loss(g: &mut Graph, pred: Var, targets: &[f64], kind: LossKind) -> Result<Var> {
    let t = g.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
    let d = g.sub(pred, t)?;
    let e = match kind {
        LossKind::Mse => g.square(d)?,
        LossKind::Mae => g.abs(d)?,
    };
    Ok(g.mean(e)?)
}

/// Masked batch over a set of sequences: stacked targets aligned with the
/// `(B * L) x V` logits of a forward pass of length `l`.
fn stacked_targets(batch: &[&MaskedBatch], l: usize) -> Vec<Option<usize>> {
    batch.iter().flat_map(|m| m.labels[..l].iter().copied()).collect()
}

/// MLM loss of `model` on one masking draw, no parameter updates.
pub fn mlm_eval_loss(
    model: &EncoderModel,
    seqs: &[TokenSequence],
    mask_rate: f64,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let v = model.config().vocab_size;
    let masked: Vec<MaskedBatch> = seqs
        .iter()
        .map(|t| apply_dynamic_mask(t, v, mask_rate, seed, epoch))
        .collect::<Result<_>>()?;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in masked.chunks(PREDICT_CHUNK) {
        let refs: Vec<&MaskedBatch> = chunk.iter().collect();
        let inputs: Vec<&TokenSequence> = chunk.iter().map(|m| &m.input).collect();
        let l = used_len(&inputs);
        let mut g = Graph::new().with_finiteness_check(false);
        let p = model.bind_constant(&mut g);
        let f = model.forward(&mut g, &p, &inputs, l, None)?;
        let logits = model.mlm_head(&mut g, &p, f.hidden)?;
        let targets = stacked_targets(&refs, l);
        let k = targets.iter().flatten().count();
        if let Some(loss) = mlm_loss(&mut g, logits, &targets)? {
            total += g.value(loss).item()? * k as f64;
            count += k;
        }
    }
    if count == 0 {
        return Err(Error::Precondition("no position was masked".into()));
    }
    Ok(total / count as f64)
}

/// Deterministic per-run random streams.
struct Streams {
    order: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut order = ChaCha8Rng::seed_from_u64(seed);
        order.set_stream(1);
        let mut dropout = ChaCha8Rng::seed_from_u64(seed);
        dropout.set_stream(2);
        Self { order, dropout }
    }
}

/// Gradient list in parameter order.
fn collect_grads(g: &Graph, loss: Var, vars: &[Var]) -> Result<Vec<Option<Tensor>>> {
    let mut grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.take(v)).collect())
}

fn step_limit_reached(cfg: &TrainConfig, steps: usize) -> bool {
    cfg.max_steps.is_some_and(|m| steps >= m)
}

/// Align text with frozen graph embeddings.
///
/// Only the encoder body, the projection head and (if learnable) the
/// temperature receive gradients. The final ragged batch of each epoch is
/// dropped.
pub fn pretrain_contrastive(
    cfg: &TrainConfig,
    init: ModelInit,
    seqs: &[TokenSequence],
    provider: &GraphEmbeddingSet,
) -> Result<(EncoderModel, Vec<LogEntry>)> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Precondition("empty pretraining corpus".into()));
    }
    let mut missing: Vec<String> = seqs
        .iter()
        .filter(|t| provider.get(&t.system_id).is_none())
        .map(|t| t.system_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingEmbeddings(missing));
    }
    let mut model = init.build(cfg.seed)?;
    let d_graph = model.config().d_graph;
    let targets: Vec<Vec<f64>> = seqs
        .iter()
        .map(|t| provider.pooled(&t.system_id).expect("checked above"))
        .collect::<Result<_>>()?;
    if targets[0].len() != d_graph {
        return Err(Error::Incompatible(format!(
            "graph embeddings have length {}, projection head produces {d_graph}",
            targets[0].len()
        )));
    }

    let opt = cfg.optimizer();
    let tau_opt = AdamW {
        weight_decay: 0.0,
        ..opt
    };
    let mut state = OptimizerState::new(model.params());
    let mut tau_param = [Tensor::scalar(cfg.tau_init.ln())];
    let mut tau_state = OptimizerState::new(&tau_param);
    let mut streams = Streams::new(cfg.seed);
    let bs = cfg.batch_size.min(seqs.len());
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = Vec::new();
    let mut steps = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut streams.order);
        let mut losses = Vec::new();
        for batch in order.chunks_exact(bs) {
            let refs: Vec<&TokenSequence> = batch.iter().map(|&i| &seqs[i]).collect();
            let graph_rows: Vec<Vec<f64>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let graph = Tensor::from_rows(&graph_rows)?;

            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let lt = if cfg.tau_learnable {
                g.param(tau_param[0].clone())
            } else {
                g.constant(tau_param[0].clone())
            };
            let f = model.forward(&mut g, &p, &refs, used_len(&refs), Some(&mut streams.dropout))?;
            let cls = model.cls_rows(&mut g, &f)?;
            let proj = model.projection_head(&mut g, &p, cls)?;
            let loss = contrastive_loss(&mut g, proj, &graph, lt)?;
            losses.push(g.value(loss).item()?);

            let mut vars = p.clone();
            vars.push(lt);
            let mut grads = collect_grads(&g, loss, &vars)?;
            let tau_grad = grads.pop().expect("tau gradient slot");
            opt.step(model.params_mut(), &grads, &mut state)?;
            if cfg.tau_learnable {
                tau_opt.step(&mut tau_param, &[tau_grad], &mut tau_state)?;
                let v = &mut tau_param[0].data_mut()[0];
                *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
            }
            steps += 1;
            if step_limit_reached(cfg, steps) {
                log.push(epoch_entry(epoch, steps, "train", &losses, None));
                break 'epochs;
            }
        }
        log.push(epoch_entry(epoch, steps, "train", &losses, None));
        log::info!("contrastive epoch {epoch}: loss {:.6}", log.last().unwrap().loss);
    }
    model.log_tau = tau_param[0].data()[0];
    Ok((model, log))
}

fn epoch_entry(epoch: usize, step: usize, split: &'static str, losses: &[f64], mae: Option<f64>) -> LogEntry {
    let loss = if losses.is_empty() {
        f64::NAN
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    LogEntry {
        epoch,
        step,
        split,
        loss,
        mae,
    }
}

/// Masked-token pretraining with masks redrawn every epoch.
pub fn pretrain_mlm(
    cfg: &TrainConfig,
    init: ModelInit,
    seqs: &[TokenSequence],
) -> Result<(EncoderModel, Vec<LogEntry>)> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Precondition("empty pretraining corpus".into()));
    }
    let mut model = init.build(cfg.seed)?;
    let vocab = model.config().vocab_size;
    let opt = cfg.optimizer();
    let mut state = OptimizerState::new(model.params());
    let mut streams = Streams::new(cfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = Vec::new();
    let mut steps = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        let masked: Vec<MaskedBatch> = seqs
            .iter()
            .map(|t| apply_dynamic_mask(t, vocab, cfg.mask_rate, cfg.seed, epoch as u64))
            .collect::<Result<_>>()?;
        order.shuffle(&mut streams.order);
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mb: Vec<&MaskedBatch> = batch.iter().map(|&i| &masked[i]).collect();
            let inputs: Vec<&TokenSequence> = mb.iter().map(|m| &m.input).collect();
            let l = used_len(&inputs);
            let targets = stacked_targets(&mb, l);
            if targets.iter().all(Option::is_none) {
                continue;
            }
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let f = model.forward(&mut g, &p, &inputs, l, Some(&mut streams.dropout))?;
            let logits = model.mlm_head(&mut g, &p, f.hidden)?;
            let loss = mlm_loss(&mut g, logits, &targets)?.expect("labeled batch");
            losses.push(g.value(loss).item()?);
            let grads = collect_grads(&g, loss, &p)?;
            opt.step(model.params_mut(), &grads, &mut state)?;
            steps += 1;
            if step_limit_reached(cfg, steps) {
                log.push(epoch_entry(epoch, steps, "train", &losses, None));
                break 'epochs;
            }
        }
        log.push(epoch_entry(epoch, steps, "train", &losses, None));
        log::info!("mlm epoch {epoch}: loss {:.6}", log.last().unwrap().loss);
    }
    Ok((model, log))
}

fn labels_of(seqs: &[TokenSequence]) -> Result<Vec<f64>> {
    let missing: Vec<String> = seqs
        .iter()
        .filter(|t| t.label.is_none())
        .map(|t| t.system_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLabels(missing));
    }
    Ok(seqs.iter().map(|t| t.label.expect("checked")).collect())
}

/// De-normalized predictions for many sequences.
pub fn predict_all(model: &EncoderModel, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(PREDICT_CHUNK) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        out.extend(model.predict_batch(&refs)?);
    }
    Ok(out)
}

fn eval_split(model: &EncoderModel, seqs: &[TokenSequence], labels: &[f64], kind: LossKind) -> Result<(f64, f64)> {
    let preds = predict_all(model, seqs)?;
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut mae = 0.0;
    for (p, y) in preds.iter().zip(labels) {
        let d = model.normalize(*p) - model.normalize(*y);
        loss += match kind {
            LossKind::Mse => d * d,
            LossKind::Mae => d.abs(),
        };
        mae += (p - y).abs();
    }
    Ok((loss / n, mae / n))
}

/// Supervised regression on energy labels.
///
/// Labels are standardized with the training-set mean and population std,
/// which are stored in the returned model. Each epoch logs the mean training
/// loss with the training MAE (eV, dropout off) and, when `val` is nonempty,
/// the validation loss and MAE.
pub fn finetune(
    cfg: &TrainConfig,
    init: ModelInit,
    train: &[TokenSequence],
    val: &[TokenSequence],
) -> Result<(EncoderModel, Vec<LogEntry>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let train_labels = labels_of(train)?;
    let val_labels = labels_of(val)?;
    let mut model = init.build(cfg.seed)?;
    let (mean, std) = target_normalization(&train_labels)?;
    model.target_mean = mean;
    model.target_std = std;
    let normalized: Vec<f64> = train_labels.iter().map(|&y| model.normalize(y)).collect();

    let opt = cfg.optimizer();
    let mut state = OptimizerState::new(model.params());
    let mut streams = Streams::new(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut streams.order);
        let mut losses = Vec::new();
        let mut stop = false;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&TokenSequence> = batch.iter().map(|&i| &train[i]).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| normalized[i]).collect();
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let f = model.forward(&mut g, &p, &refs, used_len(&refs), Some(&mut streams.dropout))?;
            let cls = model.cls_rows(&mut g, &f)?;
            let pred = model.regression_head(&mut g, &p, cls)?;
            let loss = regression_loss(&mut g, pred, &targets, cfg.loss)?;
            losses.push(g.value(loss).item()?);
            let grads = collect_grads(&g, loss, &p)?;
            opt.step(model.params_mut(), &grads, &mut state)?;
            steps += 1;
            if step_limit_reached(cfg, steps) {
                stop = true;
                break;
            }
        }
        let (_, train_mae) = eval_split(&model, train, &train_labels, cfg.loss)?;
        log.push(epoch_entry(epoch, steps, "train", &losses, Some(train_mae)));
        if !val.is_empty() {
            let (val_loss, val_mae) = eval_split(&model, val, &val_labels, cfg.loss)?;
            log.push(LogEntry {
                epoch,
                step: steps,
                split: "val",
                loss: val_loss,
                mae: Some(val_mae),
            });
        }
        log::info!(
            "finetune epoch {epoch}: loss {:.6}, train mae {train_mae:.4}",
            log.iter().rev().find(|e| e.split == "train").unwrap().loss
        );
        if stop {
            break;
        }
    }
    Ok((model, log))
}
