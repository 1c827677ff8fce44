//! Teacher pre-training, distillation and evaluation loops.

use serde::{Deserialize, Serialize};

use super::config::{DistillConfig, Scheme, ToyDecoderConfig};
use super::loss::{ce_distill_with_grad, l2l_with_grad, next_token_nll_with_grad, nll_sum, total_loss};
use super::model::ToyDecoder;
use super::optim::{adamw_step, cosine_lr, AdamWParams, TrainState};
use crate::checkpoint::Checkpoint;
use crate::corpus::{mixed_sampler, Batch, Corpus};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, RngSeed};

/// Windows evaluated together during perplexity passes.
const EVAL_BATCH: usize = 16;

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub l2l: f64,
    pub total: f64,
}

/// Closing line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    #[serde(rename = "final")]
    pub is_final: bool,
    pub steps: usize,
    pub scheme: Scheme,
    pub experts: usize,
    pub val_ppl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_val_ppl: Option<f64>,
    /// Mean gate per expert for every routed projection, block-major.
    #[serde(default)]
    pub gate_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with latent weights as left by the last step.
    pub model: ToyDecoder,
    /// The checkpointed (deployed) form of `model`.
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub final_record: FinalRecord,
}

impl TrainOutcome {
    pub fn metrics_jsonl(&self) -> String {
        metrics_jsonl(&self.log, &self.final_record)
    }
}

pub fn metrics_jsonl(log: &[StepRecord], final_record: &FinalRecord) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(final_record).expect("records serialize"));
    out.push('\n');
    out
}

/// Steps per epoch: one pass over the training tokens, unless configured.
pub fn steps_per_epoch(cfg: &DistillConfig, corpora: &[Corpus], weights: &[f64], seq_len: usize) -> usize {
    if let Some(s) = cfg.steps_per_epoch {
        return s;
    }
    let tokens: usize = corpora
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(c, _)| c.train().len())
        .sum();
    (tokens / (cfg.batch_size * seq_len)).max(1)
}

fn batch_rows(batch: &Batch) -> (Vec<&[u8]>, Vec<u8>) {
    let inputs = (0..batch.len()).map(|r| batch.inputs(r)).collect();
    let targets = (0..batch.len()).flat_map(|r| batch.targets(r).iter().copied()).collect();
    (inputs, targets)
}

fn hyper(cfg: &DistillConfig, lr: f64) -> AdamWParams {
    AdamWParams {
        lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        eps: cfg.eps,
    }
}

fn apply_update(model: &mut ToyDecoder, grads: &ToyDecoder, state: &mut TrainState, hp: AdamWParams) -> Result<()> {
    let g: Vec<&Matrix> = grads.params().into_iter().map(|(_, m)| m).collect();
    let mut p = model.params_mut();
    adamw_step(state, &mut p, &g, hp)
}

fn check_finite(step: usize, total: f64) -> Result<()> {
    if !total.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("loss is {total}"),
        });
    }
    Ok(())
}

/// Loss and gradients of one distillation step.
pub fn distill_step_grads(
    student: &ToyDecoder,
    teacher: &ToyDecoder,
    inputs: &[&[u8]],
    lambda_l2l: f64,
) -> Result<(f64, f64, ToyDecoder)> {
    let t_out = teacher.forward(inputs)?;
    let s_out = student.forward(inputs)?;
    let (ce, dlogits) = ce_distill_with_grad(&t_out.logits, &s_out.logits)?;
    let (l2l, mut dh) = l2l_with_grad(&t_out.hiddens, &s_out.hiddens)?;
    let grads = if lambda_l2l == 0.0 {
        student.backward(&s_out.cache, &dlogits, None)?
    } else {
        for d in dh.iter_mut() {
            *d = d.scale(lambda_l2l);
        }
        student.backward(&s_out.cache, &dlogits, Some(&dh))?
    };
    Ok((ce, l2l, grads))
}

/// Trains a full-precision model on next-token prediction.
pub fn pretrain(
    config: &ToyDecoderConfig,
    cfg: &DistillConfig,
    corpora: &[Corpus],
    weights: &[f64],
) -> Result<TrainOutcome> {
    config.validate()?;
    cfg.validate()?;
    if config.scheme != Scheme::Float {
        return Err(Error::Config("teachers are trained in the float scheme".into()));
    }
    let seed = RngSeed(cfg.seed);
    let mut model = ToyDecoder::new(config, seed.derive(1))?;
    let mut sampler = mixed_sampler(corpora, weights, config.seq_len, cfg.batch_size, seed.derive(2))?;
    let total_steps = cfg.epochs * steps_per_epoch(cfg, corpora, weights, config.seq_len);
    let mut state = TrainState::new(model.params().into_iter().map(|(_, m)| m));
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let lr = cosine_lr(step, total_steps, cfg.peak_lr, cfg.warmup_fraction)?;
        let batch = sampler.next_batch();
        let (inputs, targets) = batch_rows(&batch);
        let out = model.forward(&inputs)?;
        let (ce, dlogits) = next_token_nll_with_grad(&out.logits, &targets)?;
        check_finite(step, ce)?;
        let grads = model.backward(&out.cache, &dlogits, None)?;
        apply_update(&mut model, &grads, &mut state, hyper(cfg, lr))?;
        log.push(StepRecord {
            step,
            lr,
            ce,
            l2l: 0.0,
            total: ce,
        });
    }
    finish(model, cfg, corpora, log, None)
}

/// Distills `teacher` into a student of `student_config`, initialized from
/// the teacher's weights.
pub fn distill(
    teacher: &ToyDecoder,
    student_config: &ToyDecoderConfig,
    cfg: &DistillConfig,
    corpora: &[Corpus],
    weights: &[f64],
) -> Result<TrainOutcome> {
    student_config.validate()?;
    cfg.validate()?;
    let tc = &teacher.config;
    if tc.layers != student_config.layers {
        return Err(Error::Config(format!(
            "teacher has {} layers, student {}",
            tc.layers, student_config.layers
        )));
    }
    if (tc.vocab, tc.hidden, tc.heads, tc.ffn, tc.seq_len)
        != (
            student_config.vocab,
            student_config.hidden,
            student_config.heads,
            student_config.ffn,
            student_config.seq_len,
        )
    {
        return Err(Error::Config("student dimensions must match the teacher".into()));
    }
    let seed = RngSeed(cfg.seed);
    let mut base = teacher.clone();
    base.config.salient_ratio = student_config.salient_ratio;
    let mut student = base.to_student(student_config.scheme, student_config.experts, seed.derive(3))?;
    let mut sampler = mixed_sampler(corpora, weights, student_config.seq_len, cfg.batch_size, seed.derive(2))?;
    let total_steps = cfg.epochs * steps_per_epoch(cfg, corpora, weights, student_config.seq_len);
    let mut state = TrainState::new(student.params().into_iter().map(|(_, m)| m));
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let lr = cosine_lr(step, total_steps, cfg.peak_lr, cfg.warmup_fraction)?;
        let batch = sampler.next_batch();
        let (inputs, _) = batch_rows(&batch);
        let (ce, l2l, grads) = distill_step_grads(&student, teacher, &inputs, cfg.lambda_l2l)?;
        let total = total_loss(ce, l2l, cfg.lambda_l2l);
        check_finite(step, total)?;
        apply_update(&mut student, &grads, &mut state, hyper(cfg, lr))?;
        log.push(StepRecord {
            step,
            lr,
            ce,
            l2l,
            total,
        });
    }
    let teacher_ppl = validation_perplexity(teacher, corpora)?;
    finish(student, cfg, corpora, log, Some(teacher_ppl))
}

fn finish(
    model: ToyDecoder,
    cfg: &DistillConfig,
    corpora: &[Corpus],
    log: Vec<StepRecord>,
    teacher_val_ppl: Option<f64>,
) -> Result<TrainOutcome> {
    let checkpoint = Checkpoint::from_model(&model, cfg.seed)?;
    let deployed = checkpoint.to_model()?;
    let val_ppl = validation_perplexity(&deployed, corpora)?;
    let gate_means = validation_gate_means(&deployed, corpora)?;
    let final_record = FinalRecord {
        is_final: true,
        steps: log.len(),
        scheme: model.config.scheme,
        experts: model.config.experts,
        val_ppl,
        teacher_val_ppl,
        gate_means,
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
        final_record,
    })
}

/// Non-overlapping evaluation windows: inputs `text[s..e]`, targets
/// `text[s+1..e+1]`, so every token after the first is predicted once.
fn windows(text: &[u8], seq_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < text.len() {
        let end = (start + seq_len).min(text.len() - 1);
        out.push((start, end));
        start = end;
    }
    out
}

/// Summed negative log-likelihood and prediction count over `text`.
pub fn nll_total(model: &ToyDecoder, text: &[u8], seq_len: usize) -> Result<(f64, usize)> {
    if seq_len == 0 || seq_len > model.config.seq_len {
        return Err(Error::param(format!(
            "evaluation length {seq_len} outside 1..={}",
            model.config.seq_len
        )));
    }
    let wins = windows(text, seq_len);
    let mut total = 0.0;
    let mut count = 0;
    let mut i = 0;
    while i < wins.len() {
        let len = wins[i].1 - wins[i].0;
        let mut j = i;
        while j < wins.len() && j - i < EVAL_BATCH && wins[j].1 - wins[j].0 == len {
            j += 1;
        }
        let inputs: Vec<&[u8]> = wins[i..j].iter().map(|&(s, e)| &text[s..e]).collect();
        let targets: Vec<u8> = wins[i..j].iter().flat_map(|&(s, e)| text[s + 1..e + 1].iter().copied()).collect();
        let out = model.forward(&inputs)?;
        total += nll_sum(&out.logits, &targets)?;
        count += targets.len();
        i = j;
    }
    Ok((total, count))
}

/// `exp` of the mean next-token negative log-likelihood.
pub fn perplexity(model: &ToyDecoder, text: &[u8], seq_len: usize) -> Result<f64> {
    if text.len() < 2 {
        return Err(Error::param("perplexity needs at least two tokens of text"));
    }
    let (nll, count) = nll_total(model, text, seq_len)?;
    Ok((nll / count as f64).exp())
}

/// Perplexity pooled over the validation splits of all corpora.
pub fn validation_perplexity(model: &ToyDecoder, corpora: &[Corpus]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0;
    for c in corpora {
        if c.valid().len() >= 2 {
            let (n, k) = nll_total(model, c.valid(), model.config.seq_len)?;
            nll += n;
            count += k;
        }
    }
    if count == 0 {
        return Err(Error::param("no corpus has a validation split to evaluate"));
    }
    Ok((nll / count as f64).exp())
}

fn validation_gate_means(model: &ToyDecoder, corpora: &[Corpus]) -> Result<Vec<Vec<f64>>> {
    if model.config.scheme != Scheme::Mos {
        return Ok(Vec::new());
    }
    let text = match corpora.iter().find(|c| c.valid().len() >= 2) {
        Some(c) => c.valid(),
        None => return Ok(Vec::new()),
    };
    let gates = first_window_gates(model, text)?;
    Ok(gates.iter().map(column_means).collect())
}

fn column_means(m: &Matrix) -> Vec<f64> {
    m.col_sums().into_iter().map(|s| s / m.rows() as f64).collect()
}

/// Gates (`tokens × e`) of every routed projection, block-major, over the
/// first window of `text`.
fn first_window_gates(model: &ToyDecoder, text: &[u8]) -> Result<Vec<Matrix>> {
    let len = text.len().min(model.config.seq_len);
    let out = model.forward(&[&text[..len]])?;
    Ok((0..model.num_projections())
        .filter_map(|i| out.cache.gates(i).cloned())
        .collect())
}

/// Token-level routing data for one projection.
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    pub gates: Matrix,
    pub s_in_hat: Matrix,
    pub s_out_hat: Matrix,
}

/// Gates and mixed scales of projection `index` for every token of `text`,
/// evaluated in non-overlapping windows of the model's length.
pub fn trace_projection(model: &ToyDecoder, text: &[u8], index: usize) -> Result<ProjectionTrace> {
    if model.config.scheme != Scheme::Mos {
        return Err(Error::Config(format!(
            "router analysis needs a mos model, got {}",
            model.config.scheme
        )));
    }
    if text.is_empty() {
        return Err(Error::param("router analysis needs non-empty text"));
    }
    if index >= model.num_projections() {
        return Err(Error::param(format!("projection {index} out of range")));
    }
    let mut gates = Vec::new();
    let mut s_in = Vec::new();
    let mut s_out = Vec::new();
    let mut rows = 0;
    for chunk in text.chunks(model.config.seq_len) {
        let out = model.forward(&[chunk])?;
        let g = out.cache.gates(index).ok_or_else(|| Error::Config("projection has no router".into()))?;
        let (si, so) = out.cache.adaptive_scales(index).expect("routed projections carry scales");
        gates.extend_from_slice(g.data());
        s_in.extend_from_slice(si.data());
        s_out.extend_from_slice(so.data());
        rows += chunk.len();
    }
    let lin = model.projection(index).expect("index checked");
    Ok(ProjectionTrace {
        gates: Matrix::new(rows, lin.experts(), gates)?,
        s_in_hat: Matrix::new(rows, lin.in_features(), s_in)?,
        s_out_hat: Matrix::new(rows, lin.out_features(), s_out)?,
    })
}

/// Five-number summary with Tukey whiskers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Smallest value at or above `q1 − 1.5·IQR`.
    pub whisker_low: f64,
    /// Largest value at or below `q3 + 1.5·IQR`.
    pub whisker_high: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Quartiles use linear interpolation between order statistics.
pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Value("box statistics need finite, non-empty data".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let variance = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_low = s.iter().copied().find(|&v| v >= lo_fence).unwrap_or(s[0]);
    let whisker_high = s.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(s[s.len() - 1]);
    Ok(BoxStats {
        count: s.len(),
        mean,
        variance,
        min: s[0],
        q1,
        median,
        q3,
        max: s[s.len() - 1],
        whisker_low,
        whisker_high,
    })
}
