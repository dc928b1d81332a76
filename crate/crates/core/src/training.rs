//! Contrastive training of the bi-encoder.
//!
//! Each labeled instance contributes one InfoNCE term over its positive and
//! its own hard and random negatives. Gradients are computed in closed form
//! through the mean-pool + projection towers, per instance in parallel, and
//! reduced in instance order so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{sim, tokenize, EncoderParams, Tower, Vocab, MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::io::{self, derive_rng};
use crate::labeling::LabeledInstance;
use crate::taskdata::PromptPool;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on warmup; the effective warmup is also capped at `warmup_fraction` of all steps.
    pub warmup_steps: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub adam_betas: (f64, f64),
    pub embed_dim: usize,
    pub out_dim: usize,
    pub max_vocab: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-2,
            batch_size: 16,
            warmup_steps: 1000,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
            adam_eps: 1e-8,
            adam_betas: (0.9, 0.999),
            embed_dim: 64,
            out_dim: 64,
            max_vocab: 8192,
            max_seq_len: MAX_SEQ_LEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            v.push(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            v.push("batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            v.push("warmup fraction must lie in [0, 1]".into());
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            v.push("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            v.push("adam epsilon must be positive".into());
        }
        if self.weight_decay < 0.0 {
            v.push("weight decay must be non-negative".into());
        }
        if self.embed_dim == 0 || self.out_dim == 0 || self.max_vocab == 0 || self.max_seq_len == 0
        {
            v.push(
                "encoder dimensions, vocabulary size and sequence length must be at least 1".into(),
            );
        }
        v
    }

    pub fn effective_warmup(&self, total_steps: usize) -> usize {
        let cap = (self.warmup_fraction * total_steps as f64).floor() as usize;
        self.warmup_steps.min(cap)
    }
}

/// Linear warmup to the peak, then linear decay to zero at `total`. `step` is 0-based.
pub fn scheduled_lr(peak: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return 0.0;
    }
    peak * ((total - step.min(total)) as f64 / (total - warmup) as f64)
}

/// `-log(e^pos / (e^pos + Σ e^neg))`, shifted by the maximum for stability.
pub fn info_nce_loss(pos_sim: f64, neg_sims: &[f64]) -> Result<f64> {
    Ok(info_nce(pos_sim, neg_sims)?.0)
}

/// Loss plus its derivative with respect to each similarity: `(loss, dpos, dnegs)`.
pub fn info_nce(pos_sim: f64, neg_sims: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    if neg_sims.is_empty() {
        return Err(Error::Data("InfoNCE needs at least one negative".into()));
    }
    if !pos_sim.is_finite() || neg_sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("similarity passed to InfoNCE".into()));
    }
    let max = neg_sims.iter().copied().fold(pos_sim, f64::max);
    let pos_w = (pos_sim - max).exp();
    let neg_w: Vec<f64> = neg_sims.iter().map(|s| (s - max).exp()).collect();
    let neg_total: f64 = neg_w.iter().sum();
    let z = pos_w + neg_total;
    // the positive is the max when pos_w == 1: ln(1 + Σ e^(neg - pos)) without cancellation
    let loss = if pos_w == 1.0 {
        neg_total.ln_1p()
    } else {
        z.ln() - (pos_sim - max)
    };
    let dnegs: Vec<f64> = neg_w.iter().map(|w| w / z).collect();
    let dpos = -neg_total / z;
    Ok((loss, dpos, dnegs))
}

/// A labeled instance resolved to token ids and prompt ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedInstance {
    pub input_ids: Vec<u32>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Training data with the pool's token ids cached once.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub prompt_ids: Vec<Vec<u32>>,
    pub train: Vec<TokenizedInstance>,
    pub valid: Vec<TokenizedInstance>,
}

pub fn tokenize_pool(vocab: &Vocab, pool: &PromptPool, max_len: usize) -> Vec<Vec<u32>> {
    pool.records
        .iter()
        .map(|r| tokenize(vocab, &r.text, max_len))
        .collect()
}

pub fn tokenize_instances(
    vocab: &Vocab,
    pool: &PromptPool,
    instances: &[LabeledInstance],
    max_len: usize,
) -> Result<Vec<TokenizedInstance>> {
    instances
        .iter()
        .map(|inst| {
            for id in std::iter::once(inst.positive_id).chain(inst.negative_ids()) {
                if pool.get(id).is_none() {
                    return Err(Error::Data(format!(
                        "instance {}/{} references prompt {id} missing from the pool",
                        inst.task_id, inst.example_id
                    )));
                }
            }
            Ok(TokenizedInstance {
                input_ids: tokenize(vocab, &inst.input_text, max_len),
                positive: inst.positive_id,
                negatives: inst.negative_ids().collect(),
            })
        })
        .collect()
}

impl PreparedData {
    pub fn new(
        vocab: &Vocab,
        pool: &PromptPool,
        train: &[LabeledInstance],
        valid: &[LabeledInstance],
        max_len: usize,
    ) -> Result<Self> {
        Ok(Self {
            prompt_ids: tokenize_pool(vocab, pool, max_len),
            train: tokenize_instances(vocab, pool, train, max_len)?,
            valid: tokenize_instances(vocab, pool, valid, max_len)?,
        })
    }
}

/// Gradient contribution of one instance: touched embedding rows plus dense projection gradients.
struct SparseGrad {
    input_rows: BTreeMap<u32, Vec<f64>>,
    input_proj: Vec<f64>,
    prompt_rows: BTreeMap<u32, Vec<f64>>,
    prompt_proj: Vec<f64>,
}

fn scatter_rows(rows: &mut BTreeMap<u32, Vec<f64>>, ids: &[u32], grad_pooled: &[f64]) {
    let inv = 1.0 / ids.len() as f64;
    for &id in ids {
        let row = rows
            .entry(id)
            .or_insert_with(|| vec![0.0; grad_pooled.len()]);
        for (r, g) in row.iter_mut().zip(grad_pooled) {
            *r += g * inv;
        }
    }
}

/// `W · g` for a projection `W` (d_e × d) and an output-space gradient `g`.
fn back_project(tower: &Tower, g: &[f64]) -> Vec<f64> {
    (0..tower.projection.rows)
        .map(|a| {
            tower
                .projection
                .row(a)
                .iter()
                .zip(g)
                .map(|(w, x)| w * x)
                .sum()
        })
        .collect()
}

fn add_outer(acc: &mut [f64], left: &[f64], right: &[f64], scale: f64) {
    let cols = right.len();
    for (a, &l) in left.iter().enumerate() {
        let row = &mut acc[a * cols..(a + 1) * cols];
        for (r, &x) in row.iter_mut().zip(right) {
            *r += scale * l * x;
        }
    }
}

fn instance_loss(
    params: &EncoderParams,
    inst: &TokenizedInstance,
    prompt_ids: &[Vec<u32>],
) -> Result<f64> {
    let u = params.encode_input(&inst.input_ids)?;
    let s_pos = sim(&u, &params.encode_prompt(&prompt_ids[inst.positive])?)?;
    let s_neg = inst
        .negatives
        .iter()
        .map(|&n| sim(&u, &params.encode_prompt(&prompt_ids[n])?))
        .collect::<Result<Vec<_>>>()?;
    info_nce_loss(s_pos, &s_neg)
}

fn instance_grad(
    params: &EncoderParams,
    inst: &TokenizedInstance,
    prompt_ids: &[Vec<u32>],
) -> Result<(f64, SparseGrad)> {
    let xt = &params.input_tower;
    let pt = &params.prompt_tower;
    let hx = xt.pool(&inst.input_ids)?;
    let u = xt.project(&hx);

    let candidates: Vec<usize> = std::iter::once(inst.positive)
        .chain(inst.negatives.iter().copied())
        .collect();
    let pooled: Vec<Vec<f64>> = candidates
        .iter()
        .map(|&c| pt.pool(&prompt_ids[c]))
        .collect::<Result<_>>()?;
    let encoded: Vec<Vec<f64>> = pooled.iter().map(|h| pt.project(h)).collect();
    let sims: Vec<f64> = encoded.iter().map(|v| sim(&u, v)).collect::<Result<_>>()?;
    let (loss, dpos, dnegs) = info_nce(sims[0], &sims[1..])?;
    let dsims: Vec<f64> = std::iter::once(dpos).chain(dnegs).collect();

    let d = u.len();
    let mut grad = SparseGrad {
        input_rows: BTreeMap::new(),
        input_proj: vec![0.0; xt.projection.data.len()],
        prompt_rows: BTreeMap::new(),
        prompt_proj: vec![0.0; pt.projection.data.len()],
    };

    // dL/du = Σ_c dL/ds_c · v_c ; dL/dv_c = dL/ds_c · u
    let mut gu = vec![0.0; d];
    for (ds, v) in dsims.iter().zip(&encoded) {
        for (g, x) in gu.iter_mut().zip(v) {
            *g += ds * x;
        }
    }
    add_outer(&mut grad.input_proj, &hx, &gu, 1.0);
    scatter_rows(
        &mut grad.input_rows,
        &inst.input_ids,
        &back_project(xt, &gu),
    );

    for ((ds, hp), &c) in dsims.iter().zip(&pooled).zip(&candidates) {
        add_outer(&mut grad.prompt_proj, hp, &u, *ds);
        let gv: Vec<f64> = u.iter().map(|x| ds * x).collect();
        scatter_rows(
            &mut grad.prompt_rows,
            &prompt_ids[c],
            &back_project(pt, &gv),
        );
    }
    Ok((loss, grad))
}

/// Mean InfoNCE loss over a batch.
pub fn batch_loss(
    params: &EncoderParams,
    batch: &[TokenizedInstance],
    prompt_ids: &[Vec<u32>],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let losses = batch
        .par_iter()
        .map(|inst| instance_loss(params, inst, prompt_ids))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Mean batch loss and its exact gradient, shaped like `params`.
pub fn loss_gradient(
    params: &EncoderParams,
    batch: &[TokenizedInstance],
    prompt_ids: &[Vec<u32>],
) -> Result<(f64, EncoderParams)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let parts = batch
        .par_iter()
        .map(|inst| instance_grad(params, inst, prompt_ids))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (acc, x) in grad
            .input_tower
            .projection
            .data
            .iter_mut()
            .zip(&g.input_proj)
        {
            *acc += x * scale;
        }
        for (acc, x) in grad
            .prompt_tower
            .projection
            .data
            .iter_mut()
            .zip(&g.prompt_proj)
        {
            *acc += x * scale;
        }
        for (id, row) in g.input_rows {
            for (acc, x) in grad
                .input_tower
                .embedding
                .row_mut(id as usize)
                .iter_mut()
                .zip(&row)
            {
                *acc += x * scale;
            }
        }
        for (id, row) in g.prompt_rows {
            for (acc, x) in grad
                .prompt_tower
                .embedding
                .row_mut(id as usize)
                .iter_mut()
                .zip(&row)
            {
                *acc += x * scale;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Fraction of instances whose positive strictly outscores every own negative.
pub fn retrieval_accuracy(
    params: &EncoderParams,
    instances: &[TokenizedInstance],
    prompt_ids: &[Vec<u32>],
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Data("no validation instances".into()));
    }
    let hits = instances
        .par_iter()
        .map(|inst| {
            let u = params.encode_input(&inst.input_ids)?;
            let s_pos = sim(&u, &params.encode_prompt(&prompt_ids[inst.positive])?)?;
            for &n in &inst.negatives {
                if sim(&u, &params.encode_prompt(&prompt_ids[n])?)? >= s_pos {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / instances.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Adam step with decoupled weight decay.
    fn step(
        &mut self,
        params: &mut EncoderParams,
        grad: &EncoderParams,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let (b1, b2) = cfg.adam_betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let grads: Vec<f64> = grad.params().collect();
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_param_mut(|p| {
            let g = grads[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            *p -= lr * (update + cfg.weight_decay * *p);
            i += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub epoch: usize,
    pub valid_accuracy: f64,
    pub vocab: Vec<String>,
    pub params: EncoderParams,
}

pub const CHECKPOINT_FORMAT: u32 = 1;

impl Checkpoint {
    pub fn new(vocab: &Vocab, params: EncoderParams, epoch: usize, valid_accuracy: f64) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT,
            epoch,
            valid_accuracy,
            vocab: vocab.tokens().to_vec(),
            params,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.vocab.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Loads and validates format, shapes and the vocabulary hash.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = io::read_json(path)?;
        if ckpt.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {}",
                ckpt.format_version
            )));
        }
        let vocab = ckpt.vocab()?;
        if vocab.hash() != ckpt.params.vocab_hash {
            return Err(Error::Fingerprint {
                expected: ckpt.params.vocab_hash.clone(),
                found: vocab.hash(),
            });
        }
        if vocab.len() != ckpt.params.dims.vocab_size {
            return Err(Error::Data(
                "vocabulary size differs from encoder dims".into(),
            ));
        }
        ckpt.params.check()?;
        if !(0.0..=1.0).contains(&ckpt.valid_accuracy) {
            return Err(Error::Data(format!(
                "validation accuracy {} outside [0, 1]",
                ckpt.valid_accuracy
            )));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    /// Validation accuracy of the initial parameters.
    pub initial_accuracy: f64,
    pub epochs: Vec<EpochStats>,
    pub log: Vec<LogRow>,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains from a seeded initialization and returns the epoch checkpoint with
/// the best validation accuracy (earliest on ties).
pub fn train(vocab: &Vocab, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Data(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let mut params = EncoderParams::init(vocab, cfg.embed_dim, cfg.out_dim, cfg.seed);
    let initial_accuracy = retrieval_accuracy(&params, &data.valid, &data.prompt_ids)?;
    log::info!("initial validation retrieval accuracy {initial_accuracy:.4}");

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = cfg.effective_warmup(total);
    let mut adam = Adam::new(params.num_params());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    let mut log_rows = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = derive_rng(cfg.seed, &["epoch", &epoch.to_string()]);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TokenizedInstance> =
                chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (loss, grad) = loss_gradient(&params, &batch, &data.prompt_ids)?;
            if !loss.is_finite() || grad.params().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at step {step} (epoch {epoch}), batch instances {chunk:?}"
                )));
            }
            let lr = scheduled_lr(cfg.learning_rate, step, warmup, total);
            adam.step(&mut params, &grad, lr, cfg);
            log_rows.push(LogRow {
                step,
                epoch,
                loss,
                lr,
            });
            loss_sum += loss;
            step += 1;
        }
        let acc = retrieval_accuracy(&params, &data.valid, &data.prompt_ids)?;
        let mean_loss = loss_sum / steps_per_epoch as f64;
        log::info!(
            "epoch {epoch}: mean loss {mean_loss:.5}, validation retrieval accuracy {acc:.4}"
        );
        epochs.push(EpochStats {
            epoch,
            mean_loss,
            valid_accuracy: acc,
        });
        if best.as_ref().is_none_or(|b| acc > b.valid_accuracy) {
            best = Some(Checkpoint::new(vocab, params.clone(), epoch, acc));
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        initial_accuracy,
        epochs,
        log: log_rows,
    })
}
