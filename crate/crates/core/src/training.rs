//! Backbone pretraining on the arithmetic task and residual-head
//! distillation with K-step unrolling.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Denoiser};
use crate::corpus::Example;
use crate::diffusion::{corrupt, row_candidate, SequenceState};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::mrp::{MrpConfig, MrpHead, Objective, ResidualOutput};
use crate::numerics::{adamw_step, softmax_in_place, AdamWConfig, Graph, OptimizerState, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevealOrder {
    LowestIndex,
    Confidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Examples per gradient-accumulation chunk; chunks are reduced in order.
    pub micro_batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Derived from epochs and dataset size when absent.
    pub total_steps: Option<usize>,
    pub grad_clip: Option<f64>,
    pub kd_temperature: f64,
    pub unroll: usize,
    pub reveal_k: usize,
    /// Uniform when absent.
    pub step_weights: Option<Vec<f64>>,
    pub reveal_order: RevealOrder,
    /// Backbone only: probability that a visible response token is swapped
    /// for a random one and trained to predict the original.
    pub substitute_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            micro_batch: 16,
            peak_lr: 1e-3,
            min_lr: 1e-4,
            weight_decay: 0.0,
            total_steps: None,
            grad_clip: Some(1.0),
            kd_temperature: 1.0,
            unroll: 2,
            reveal_k: 1,
            step_weights: None,
            reveal_order: RevealOrder::LowestIndex,
            substitute_prob: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.micro_batch == 0 {
            return bad("epochs, batch_size and micro_batch must be positive");
        }
        if !(self.kd_temperature > 0.0) {
            return bad("kd_temperature must be positive");
        }
        if self.unroll == 0 || self.reveal_k == 0 {
            return bad("unroll and reveal_k must be at least 1");
        }
        if !(self.peak_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= peak_lr, peak_lr > 0");
        }
        if !(0.0..1.0).contains(&self.substitute_prob) {
            return bad("substitute_prob must lie in [0, 1)");
        }
        if let Some(w) = &self.step_weights {
            if w.len() != self.unroll {
                return bad("step_weights needs one entry per unroll step");
            }
            if w.iter().any(|&v| v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("step_weights must be non-negative and sum to 1");
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.step_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.unroll as f64; self.unroll])
    }

    pub fn steps_for(&self, n_examples: usize) -> usize {
        self.total_steps
            .unwrap_or_else(|| self.epochs * n_examples.div_ceil(self.batch_size))
    }

    fn optimizer(&self, total_steps: usize) -> AdamWConfig {
        AdamWConfig {
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            total_steps,
            ..Default::default()
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub step_losses: Vec<f64>,
    pub wall_seconds: f64,
}

pub fn write_log(path: &Path, rows: &[LogRow], unroll: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "lr".into(), "loss".into()];
    header.extend((1..=unroll).map(|j| format!("loss_j{j}")));
    header.push("wall_seconds".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), format!("{:e}", r.lr), format!("{}", r.loss)];
        rec.extend((0..unroll).map(|j| r.step_losses.get(j).map_or(String::new(), |v| v.to_string())));
        rec.push(format!("{:.3}", r.wall_seconds));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Epoch-shuffled example order, cut into batches.
fn batches(n: usize, cfg: &TrainConfig, steps: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    while out.len() < steps {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut exec::stream_rng(cfg.seed, 1, epoch));
        for chunk in order.chunks(cfg.batch_size) {
            if out.len() == steps {
                break;
            }
            out.push(chunk.to_vec());
        }
        epoch += 1;
    }
    out
}

type ParamGrads = Vec<(ParamId, Vec<f64>)>;

fn reduce_into(store: &mut ParamStore, parts: Vec<ParamGrads>, scale: f64) -> Result<()> {
    for part in parts {
        for (id, g) in part {
            let p = store.get_mut(id);
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += scale * b),
                None => {
                    let data = g.iter().map(|v| scale * v).collect();
                    p.grad = Some(Tensor::new(p.value.shape().to_vec(), data)?);
                }
            }
        }
    }
    Ok(())
}

fn clip(store: &mut ParamStore, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = store.grad_norm();
        if norm > max {
            store.scale_grads(max / norm);
        }
    }
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("loss is {loss}"),
        })
    }
}

/// Cross-entropy of one corrupted example, averaged over its masked
/// positions, with gradients for every backbone parameter.
pub fn backbone_example_loss(
    backbone: &Backbone,
    x0: &SequenceState,
    x: &SequenceState,
    scale: f64,
) -> Result<(f64, ParamGrads)> {
    let targets: Vec<(usize, usize)> = x
        .response_range()
        .filter(|&i| x.masked[i] || x.ids[i] != x0.ids[i])
        .map(|i| (i, x0.ids[i]))
        .collect();
    if targets.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut g = Graph::new();
    let vars = backbone.build(&mut g, &x.ids, x.prompt_len, true)?;
    let s = scale / targets.len() as f64;
    let loss = g.cross_entropy(vars.logits, &targets, s)?;
    let value = g.value(loss).item()? / scale;
    let grads = g.backward(loss)?;
    Ok((value, grads.params()))
}

/// Replaces each visible response token with probability `prob` by a
/// uniformly drawn different non-MASK token.
pub fn substitute<R: Rng + ?Sized>(x: &mut SequenceState, prob: f64, vocab_size: usize, rng: &mut R) {
    if prob <= 0.0 {
        return;
    }
    for i in x.response_range() {
        if !x.masked[i] && rng.random::<f64>() < prob {
            let mut t = rng.random_range(1..vocab_size - 1);
            if t >= x.ids[i] {
                t += 1;
            }
            x.ids[i] = t;
        }
    }
}

/// Trains a fresh backbone with masked cross-entropy, plus cross-entropy at
/// substituted positions when `substitute_prob > 0`. `on_step` sees every
/// log row as it is produced.
pub fn train_backbone(
    examples: &[Example],
    config: &BackboneConfig,
    train: &TrainConfig,
    mode: ExecMode,
    mut on_step: impl FnMut(&LogRow),
) -> Result<(Backbone, Vec<LogRow>)> {
    train.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut backbone = Backbone::new(config.clone(), train.seed)?;
    let states = examples
        .iter()
        .map(|e| SequenceState::from_example(e, config.block_size))
        .collect::<Result<Vec<_>>>()?;
    let steps = train.steps_for(examples.len());
    let mut opt = OptimizerState::new(train.optimizer(steps), &backbone.params);
    let mut log = Vec::with_capacity(steps);
    let start = Instant::now();

    for (step, batch) in batches(examples.len(), train, steps).into_iter().enumerate() {
        backbone.params.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for micro in batch.chunks(train.micro_batch) {
            let results = exec::map_with(mode, micro, |&idx| {
                let mut rng = exec::stream_rng(train.seed, 2 + step as u64, idx as u64);
                let mut x = corrupt(&states[idx], &mut rng)?;
                substitute(&mut x, train.substitute_prob, config.vocab_size, &mut rng);
                backbone_example_loss(&backbone, &states[idx], &x, scale)
            });
            let mut parts = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                loss += l * scale;
                parts.push(g);
            }
            reduce_into(&mut backbone.params, parts, 1.0)?;
        }
        check_finite(step, loss)?;
        let lr = opt.current_lr();
        if backbone.params.iter().all(|p| p.grad.is_none()) {
            opt.step_count += 1;
        } else {
            clip(&mut backbone.params, train.grad_clip);
            adamw_step(&mut backbone.params, &mut opt)?;
        }
        let row = LogRow {
            step,
            lr,
            loss,
            step_losses: Vec::new(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&row);
        log.push(row);
    }
    backbone.params.zero_grad();
    Ok((backbone, log))
}

/// For every block holding masks, restores the `k` first masked positions
/// (lowest index) from `x0`.
pub fn reveal_ground_truth(x: &SequenceState, x0: &SequenceState, k: usize) -> Result<SequenceState> {
    reveal_ground_truth_by(x, x0, k, RevealOrder::LowestIndex, None)
}

/// As [`reveal_ground_truth`]; with `RevealOrder::Confidence` the positions
/// are the `k` most confident under `logits` (ties to the lower index).
pub fn reveal_ground_truth_by(
    x: &SequenceState,
    x0: &SequenceState,
    k: usize,
    order: RevealOrder,
    logits: Option<&Tensor>,
) -> Result<SequenceState> {
    if x.ids.len() != x0.ids.len() {
        return Err(Error::InvalidShape("state and reference differ in length".into()));
    }
    let mut y = x.clone();
    let mut positions = Vec::new();
    for b in 0..x.n_blocks() {
        let mut masked = x.masked_in(x.block_range(b));
        if masked.is_empty() {
            continue;
        }
        if order == RevealOrder::Confidence {
            let logits = logits
                .ok_or_else(|| Error::Contract("confidence reveal order needs logits".into()))?;
            let mut scored: Vec<(f64, usize)> = masked
                .iter()
                .map(|&i| (row_candidate(logits.row(i), i).prob, i))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            masked = scored.into_iter().map(|(_, i)| i).collect();
        }
        positions.extend(masked.into_iter().take(k));
    }
    positions.sort_unstable();
    let tokens: Vec<usize> = positions.iter().map(|&i| x0.ids[i]).collect();
    y.place(&positions, &tokens)?;
    y.refresh_block();
    Ok(y)
}

/// Where the unrolled loss gets its residual predictions from.
pub enum HeadSource<'h> {
    Model(&'h MrpHead),
    /// Fixed outputs per unroll step (1-based index), for oracle checks.
    Fixed(&'h dyn Fn(usize, &SequenceState) -> ResidualOutput),
}

/// Per-sequence unrolled distillation loss.
pub struct UnrollOutcome {
    pub total: f64,
    pub step_losses: Vec<f64>,
    pub grads: ParamGrads,
}

fn teacher_rows(logits: &Tensor, rows: &[usize], temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * logits.cols());
    for &r in rows {
        let mut p: Vec<f64> = logits.row(r).iter().map(|v| v / temperature).collect();
        softmax_in_place(&mut p);
        out.extend(p);
    }
    out
}

/// Unrolled loss for one corrupted sequence `xt` of the clean `x0`.
///
/// Step j reveals ground truth to reach `x_{t−j}`, queries the frozen
/// backbone for the teacher, runs the head on `(x_{t−j}, h_acc)` and scores
/// the student at positions still masked in `x_{t−j}`.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_loss<F: Denoiser + ?Sized>(
    backbone: &F,
    source: HeadSource<'_>,
    objective: Objective,
    x0: &SequenceState,
    xt: &SequenceState,
    train: &TrainConfig,
    scale: f64,
    want_grads: bool,
) -> Result<UnrollOutcome> {
    let weights = train.weights();
    let base = backbone.forward(&xt.ids, xt.prompt_len)?;
    let mut g = Graph::new();
    let mut h_acc = g.input(base.h);
    let base_logits = g.input(base.logits);
    let mut student_acc = None;
    let mut prev_logits = g.value(base_logits).clone();
    let mut x = xt.clone();
    let mut terms = Vec::new();
    let mut step_losses = vec![0.0; train.unroll];

    for j in 1..=train.unroll {
        if x.masked_count() == 0 {
            break;
        }
        let next = reveal_ground_truth_by(&x, x0, train.reveal_k, train.reveal_order, Some(&prev_logits))?;
        let rows: Vec<usize> = (0..next.len()).filter(|&i| next.masked[i]).collect();
        let teacher = backbone.forward(&next.ids, next.prompt_len)?;
        let (dh, dl) = match &source {
            HeadSource::Model(head) => {
                let v = head.build(&mut g, backbone, &next.ids, next.prompt_len, h_acc, want_grads)?;
                (v.delta_h, v.delta_logits)
            }
            HeadSource::Fixed(f) => {
                let out = f(j, &next);
                (g.input(out.delta_h), g.input(out.delta_logits))
            }
        };
        let student = match objective {
            Objective::Residual => {
                h_acc = g.add(h_acc, dh)?;
                let acc = match student_acc {
                    None => dl,
                    Some(s) => g.add(s, dl)?,
                };
                student_acc = Some(acc);
                g.add(base_logits, acc)?
            }
            Objective::Direct => {
                h_acc = dh;
                dl
            }
        };
        if !rows.is_empty() {
            let t = teacher_rows(&teacher.logits, &rows, train.kd_temperature);
            let l = g.kl_to_logits(student, &rows, t, train.kd_temperature, 1.0 / rows.len() as f64)?;
            step_losses[j - 1] = g.value(l).item()?;
            terms.push((l, weights[j - 1] * scale));
        }
        prev_logits = teacher.logits;
        x = next;
    }

    let total_scaled = if terms.is_empty() {
        return Ok(UnrollOutcome {
            total: 0.0,
            step_losses,
            grads: Vec::new(),
        });
    } else {
        g.weighted_sum(&terms)?
    };
    let total = step_losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
    let grads = if want_grads && g.is_tracked(total_scaled) {
        g.backward(total_scaled)?.params()
    } else {
        Vec::new()
    };
    Ok(UnrollOutcome {
        total,
        step_losses,
        grads,
    })
}

/// One optimizer step of the residual head on a batch of clean sequences.
/// Returns the mean loss and mean per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn mrp_train_step(
    batch: &[SequenceState],
    backbone: &Backbone,
    head: &mut MrpHead,
    opt: &mut OptimizerState,
    train: &TrainConfig,
    step: usize,
    mode: ExecMode,
) -> Result<(f64, Vec<f64>)> {
    let objective = head.objective();
    head.params.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let indexed: Vec<(usize, &SequenceState)> = batch.iter().enumerate().collect();
    let mut loss = 0.0;
    let mut per_step = vec![0.0; train.unroll];
    for micro in indexed.chunks(train.micro_batch) {
        let h: &MrpHead = head;
        let results = exec::map_with(mode, micro, |&(idx, x0)| {
            let mut rng = exec::stream_rng(train.seed, 2 + step as u64, idx as u64);
            let xt = corrupt(x0, &mut rng)?;
            unrolled_loss(backbone, HeadSource::Model(h), objective, x0, &xt, train, scale, true)
        });
        let mut parts = Vec::with_capacity(results.len());
        for r in results {
            let out = r?;
            loss += out.total * scale;
            for (a, b) in per_step.iter_mut().zip(&out.step_losses) {
                *a += b * scale;
            }
            parts.push(out.grads);
        }
        reduce_into(&mut head.params, parts, 1.0)?;
    }
    check_finite(step, loss)?;
    if head.params.iter().any(|p| p.grad.is_some()) {
        clip(&mut head.params, train.grad_clip);
        adamw_step(&mut head.params, opt)?;
    } else {
        opt.step_count += 1;
    }
    Ok((loss, per_step))
}

/// Direct-objective variant of [`mrp_train_step`]; the head must have been
/// built with `Objective::Direct`.
#[allow(clippy::too_many_arguments)]
pub fn direct_train_step(
    batch: &[SequenceState],
    backbone: &Backbone,
    head: &mut MrpHead,
    opt: &mut OptimizerState,
    train: &TrainConfig,
    step: usize,
    mode: ExecMode,
) -> Result<(f64, Vec<f64>)> {
    if head.objective() != Objective::Direct {
        return Err(Error::InvalidConfig("direct_train_step needs a direct-objective head".into()));
    }
    mrp_train_step(batch, backbone, head, opt, train, step, mode)
}

/// Trains a residual head against a frozen backbone.
pub fn train_mrp(
    examples: &[Example],
    backbone: &Backbone,
    mrp: &MrpConfig,
    train: &TrainConfig,
    mode: ExecMode,
    mut on_step: impl FnMut(&LogRow),
) -> Result<(MrpHead, Vec<LogRow>)> {
    train.validate()?;
    mrp.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let bc = &backbone.config;
    let init_seed: u64 = ChaCha8Rng::seed_from_u64(train.seed ^ 0x4D52_5043).random();
    let mut head = MrpHead::new(mrp.clone(), bc.d_model, bc.n_heads, bc.norm_eps, init_seed)?;
    let states = examples
        .iter()
        .map(|e| SequenceState::from_example(e, bc.block_size))
        .collect::<Result<Vec<_>>>()?;
    let steps = train.steps_for(examples.len());
    let mut opt = OptimizerState::new(train.optimizer(steps), &head.params);
    let mut log = Vec::with_capacity(steps);
    let start = Instant::now();
    for (step, idx) in batches(examples.len(), train, steps).into_iter().enumerate() {
        let batch: Vec<SequenceState> = idx.iter().map(|&i| states[i].clone()).collect();
        let lr = crate::numerics::cosine_lr(step, &opt.config);
        let (loss, per_step) = mrp_train_step(&batch, backbone, &mut head, &mut opt, train, step, mode)?;
        let row = LogRow {
            step,
            lr,
            loss,
            step_losses: per_step,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&row);
        log.push(row);
    }
    head.params.zero_grad();
    Ok((head, log))
}

/// Plain-text progress line for a log row.
pub fn progress_line(row: &LogRow, out: &mut impl Write) {
    let _ = writeln!(
        out,
        "step {:>6}  lr {:.2e}  loss {:.5}  {:.1}s",
        row.step, row.lr, row.loss, row.wall_seconds
    );
}
