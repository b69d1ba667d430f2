//! Loss, AdamW, learning-rate schedule, the training/eval loops, and the
//! full-model gradient checker.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{HgrnError, Result};
use crate::model::{bind_params, init_params, model_forward, ModelConfig, ModelParams};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InverseSqrt,
    Cosine,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_steps")]
    pub total_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_peak_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.2
}
fn default_warmup() -> usize {
    400
}
fn default_schedule() -> Schedule {
    Schedule::InverseSqrt
}
fn default_batch() -> usize {
    16
}
fn default_seq_len() -> usize {
    256
}
fn default_steps() -> usize {
    5000
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(HgrnError::Config("peak_lr must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(HgrnError::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then inverse-sqrt or cosine decay.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps.max(1);
    if step == 0 {
        return 0.0;
    }
    if step <= warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::InverseSqrt => cfg.peak_lr * (warmup as f64 / step as f64).sqrt(),
        Schedule::Cosine => {
            let total = cfg.total_steps.max(warmup + 1);
            let frac = (step - warmup) as f64 / (total - warmup) as f64;
            cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
        }
    }
}

/// Decoupled weight decay is skipped for theta, Gamma, norm gains, and all
/// biases.
pub fn weight_decay_applies(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !(last == "gamma"
        || last == "theta"
        || last == "head_b"
        || last.starts_with("b_")
        || last.ends_with("gain")
        || last.ends_with("bias"))
}

/// First/second moment state, one entry per named parameter in fixed order.
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let shapes: Vec<_> = params
            .named()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One AdamW update over all parameters. `grads` must be in the fixed
/// named order; `lr` is the already-scheduled learning rate.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let epst = T::from_f64(cfg.adam_eps);
    let lrt = T::from_f64(lr);
    let named = params.named_mut();
    if named.len() != grads.len() {
        return Err(HgrnError::Shape(format!(
            "adamw: {} params vs {} grads",
            named.len(),
            grads.len()
        )));
    }
    for (idx, (name, param)) in named.into_iter().enumerate() {
        let g = &grads[idx];
        if g.shape() != param.shape() {
            return Err(HgrnError::Shape(format!(
                "adamw: grad shape {:?} vs param {name} {:?}",
                g.shape(),
                param.shape()
            )));
        }
        let decay = if cfg.weight_decay > 0.0 && weight_decay_applies(&name) {
            T::from_f64(lr * cfg.weight_decay)
        } else {
            T::zero()
        };
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = param.data_mut();
        let bc1t = T::from_f64(bc1);
        let bc2t = T::from_f64(bc2);
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + ob1 * gi;
            v[i] = b2 * v[i] + ob2 * gi * gi;
            let mhat = m[i] / bc1t;
            let vhat = v[i] / bc2t;
            p[i] = p[i] - lrt * mhat / (vhat.sqrt() + epst) - decay * p[i];
        }
    }
    Ok(())
}

/// One training example: input tokens, next-token targets, and the loss
/// mask over positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Deterministic batch provider: the batch at a given step is a pure
/// function of (source, step).
pub trait BatchSource {
    fn batch(&self, step: usize, batch_size: usize) -> Vec<Sample>;
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_ppl: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,train_loss,val_loss,val_ppl,lr,wall_ms";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9}"));
        format!(
            "{},{:.9},{},{},{:.9},{:.3}",
            self.step,
            self.train_loss,
            opt(self.val_loss),
            opt(self.val_ppl),
            self.lr,
            self.wall_ms
        )
    }
}

/// Runs `total_steps` of forward/backward/update. Deterministic given the
/// source and seed; aborts with a gate diagnostic on non-finite loss.
pub fn train<T: Scalar>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    params: &mut ModelParams<T>,
    source: &dyn BatchSource,
    log_every: usize,
    mut eval_fn: Option<&mut dyn FnMut(&ModelParams<T>) -> Result<f64>>,
    mut on_record: Option<&mut dyn FnMut(&MetricsRecord)>,
) -> Result<Vec<MetricsRecord>> {
    tcfg.validate()?;
    mcfg.validate()?;
    let mut state = AdamState::new(params);
    let mut records = Vec::new();
    let start = Instant::now();
    for step in 1..=tcfg.total_steps {
        let batch = source.batch(step, tcfg.batch_size);
        let (loss, grads, lambda_diag) = train_step_grads(mcfg, params, &batch)?;
        if !loss.is_finite() {
            return Err(HgrnError::Numeric(format!(
                "non-finite loss at step {step}; per-layer mean lambda = {lambda_diag:?}"
            )));
        }
        let lr = lr_at(step, tcfg);
        let grads = match tcfg.grad_clip {
            Some(max_norm) => clip_by_global_norm(grads, max_norm),
            None => grads,
        };
        adamw_step(params, &grads, &mut state, tcfg, lr)?;
        let last = step == tcfg.total_steps;
        if (log_every > 0 && step % log_every == 0) || last {
            let val_loss = match eval_fn.as_mut() {
                Some(f) => Some(f(params)?),
                None => None,
            };
            let rec = MetricsRecord {
                step,
                train_loss: loss,
                val_loss,
                val_ppl: val_loss.map(f64::exp),
                lr,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            if let Some(cb) = on_record.as_mut() {
                cb(&rec);
            }
            records.push(rec);
        }
    }
    Ok(records)
}

/// Forward/backward over one batch; returns (mean loss, grads in named
/// order, per-layer mean lambda for diagnostics).
pub fn train_step_grads<T: Scalar>(
    mcfg: &ModelConfig,
    params: &ModelParams<T>,
    batch: &[Sample],
) -> Result<(f64, Vec<Tensor<T>>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(HgrnError::Contract("empty batch".into()));
    }
    let mut tape = Tape::<T>::new();
    let vars = bind_params(&mut tape, params, true);
    let mut total: Option<crate::tape::Var> = None;
    let mut lambda_diag = vec![0.0f64; mcfg.layers];
    for sample in batch {
        let out = model_forward(&mut tape, &vars, &sample.tokens, mcfg)?;
        let loss = tape.cross_entropy(out.logits, &sample.targets, &sample.mask)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
        for (k, lam) in out.lambdas.iter().enumerate() {
            let v = tape.value(*lam);
            lambda_diag[k] += v.data().iter().map(|x| x.as_f64()).sum::<f64>()
                / (v.numel() as f64 * batch.len() as f64);
        }
    }
    let mean = tape.scalar_mul(total.unwrap(), 1.0 / batch.len() as f64);
    tape.backward(mean)?;
    let grads = vars
        .ordered
        .iter()
        .map(|&v| tape.grad(v).expect("parameter leaf requires grad").clone())
        .collect();
    Ok((tape.value(mean).data()[0].as_f64(), grads, lambda_diag))
}

fn clip_by_global_norm<T: Scalar>(mut grads: Vec<Tensor<T>>, max_norm: f64) -> Vec<Tensor<T>> {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for g in &mut grads {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    grads
}

/// Mean per-token cross-entropy over non-overlapping windows of `corpus`,
/// exponentiated to perplexity. Needs at least `seq_len + 1` tokens.
pub fn evaluate_ppl<T: Scalar>(
    mcfg: &ModelConfig,
    params: &ModelParams<T>,
    corpus: &[usize],
    seq_len: usize,
) -> Result<(f64, f64)> {
    if corpus.len() < seq_len + 1 {
        return Err(HgrnError::Contract(format!(
            "corpus of {} tokens too short for seq_len {seq_len}",
            corpus.len()
        )));
    }
    let mut total_nll = 0.0f64;
    let mut total_count = 0usize;
    let mut offset = 0;
    while offset + seq_len + 1 <= corpus.len() {
        let tokens = &corpus[offset..offset + seq_len];
        let targets = &corpus[offset + 1..offset + seq_len + 1];
        let mask = vec![true; seq_len];
        let mut tape = Tape::<T>::new();
        let vars = bind_params(&mut tape, params, false);
        let out = model_forward(&mut tape, &vars, tokens, mcfg)?;
        let loss = tape.cross_entropy(out.logits, targets, &mask)?;
        total_nll += tape.value(loss).data()[0].as_f64() * seq_len as f64;
        total_count += seq_len;
        offset += seq_len;
    }
    let mean = total_nll / total_count as f64;
    Ok((mean, mean.exp()))
}

/// Fraction of masked positions where the argmax logit equals the target.
pub fn masked_accuracy<T: Scalar>(
    mcfg: &ModelConfig,
    params: &ModelParams<T>,
    samples: &[Sample],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in samples {
        let mut tape = Tape::<T>::new();
        let vars = bind_params(&mut tape, params, false);
        let out = model_forward(&mut tape, &vars, &sample.tokens, mcfg)?;
        let logits = tape.value(out.logits);
        let (_, v) = logits.dims2()?;
        for (i, (&target, &masked)) in sample.targets.iter().zip(&sample.mask).enumerate() {
            if !masked {
                continue;
            }
            let mut best = 0;
            for j in 1..v {
                if logits.at2(i, j) > logits.at2(i, best) {
                    best = j;
                }
            }
            if best == target {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(HgrnError::Contract("no masked positions to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Per-parameter max relative error between analytic and central
/// finite-difference gradients on a fixed random batch.
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|(_, e)| *e < self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|(_, e)| *e >= self.tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Central-difference check of every parameter of a (small) model against
/// the tape's analytic gradients. Intended for f64.
pub fn gradient_check_model<T: Scalar>(
    mcfg: &ModelConfig,
    seq_len: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let params = init_params::<T>(mcfg, seed)?;
    let tokens: Vec<usize> = (0..seq_len)
        .map(|_| rng.gen_range(0..mcfg.vocab_size))
        .collect();
    let targets: Vec<usize> = (0..seq_len)
        .map(|_| rng.gen_range(0..mcfg.vocab_size))
        .collect();
    let sample = Sample {
        tokens,
        targets,
        mask: vec![true; seq_len],
    };
    let (_, analytic, _) = train_step_grads(mcfg, &params, std::slice::from_ref(&sample))?;
    let loss_of = |p: &ModelParams<T>| -> Result<f64> {
        let mut tape = Tape::<T>::new();
        let vars = bind_params(&mut tape, p, false);
        let out = model_forward(&mut tape, &vars, &sample.tokens, mcfg)?;
        let loss = tape.cross_entropy(out.logits, &sample.targets, &sample.mask)?;
        Ok(tape.value(loss).data()[0].as_f64())
    };
    let eps = 1e-5;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut scratch = params.clone();
    let mut per_param = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let numel = analytic[pi].numel();
        let mut worst = 0.0f64;
        for ci in 0..numel {
            let orig = scratch.named_mut()[pi].1.data_mut()[ci];
            scratch.named_mut()[pi].1.data_mut()[ci] = orig + T::from_f64(eps);
            let lp = loss_of(&scratch)?;
            scratch.named_mut()[pi].1.data_mut()[ci] = orig - T::from_f64(eps);
            let lm = loss_of(&scratch)?;
            scratch.named_mut()[pi].1.data_mut()[ci] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic[pi].data()[ci].as_f64();
            let rel = (an - fd).abs() / (fd.abs().max(an.abs()) + 1e-8);
            worst = worst.max(rel);
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_param, tolerance })
}
