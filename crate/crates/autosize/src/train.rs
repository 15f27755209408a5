//! Training loop with proximal group-sparsity steps.
//!
//! Each step runs forward, label-smoothed loss, backward, global-norm
//! gradient clipping, an Adam update, and then, when a regularizer is
//! configured with a positive coefficient, the closed-form prox of that
//! regularizer on every scoped matrix at step size `lr * lambda`. The prox
//! writes exact zeros, and whenever it kills a feed-forward `w1` row the
//! matching `b1` entry is zeroed with it so the unit is truly gone. A zero
//! coefficient skips the prox entirely, bit for bit.
//!
//! The learning rate halves after `patience` epochs without a dev-loss
//! improvement and training stops once it falls below the floor. The best
//! dev-loss parameters are kept alongside the final ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sequential_batches, shuffled_batches, SentencePair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Batch, Parameter, TransformerModel};
use crate::prox::{l21_prox_row, linf_prox_row, regularizer_value, ProxStepSize, RegKind};
use crate::sizing::{row_census, scoped_params, Scope, ScopeKind, ScopeSide};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    /// Group regularizer and its coefficient; `None` and a zero coefficient
    /// both train plain Adam.
    pub reg: Option<(RegKind, f64)>,
    pub scope: Scope,
    pub lr_decay: f64,
    pub patience: usize,
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr: 1e-4,
            clip_norm: 0.1,
            label_smoothing: 0.1,
            reg: None,
            scope: Scope {
                side: ScopeSide::Both,
                kind: ScopeKind::Ffn,
            },
            lr_decay: 0.5,
            patience: 3,
            lr_floor: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing must be in [0, 1], got {}",
                self.label_smoothing
            ));
        }
        if let Some((_, lambda)) = self.reg {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return fail(format!(
                    "regularizer coefficient must be finite and >= 0, got {lambda}"
                ));
            }
        }
        if !(0.0 < self.lr_decay && self.lr_decay < 1.0) {
            return fail(format!("lr_decay must be in (0, 1), got {}", self.lr_decay));
        }
        if !(self.lr_floor.is_finite() && self.lr_floor > 0.0) {
            return fail(format!("lr_floor must be positive, got {}", self.lr_floor));
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair of buffers per model parameter.
/// Per-entry arithmetic runs in f64 and narrows on store.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(model: &TransformerModel<f32>) -> Self {
        let zeros =
            |p: &Parameter<f32>| Tensor::zeros(p.value.shape().to_vec()).expect("param shape");
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: model.params().iter().map(zeros).collect(),
            v: model.params().iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `(param index, gradient)` pairs. Parameters without
    /// a gradient this step are left alone, moments included.
    pub fn update(
        &mut self,
        model: &mut TransformerModel<f32>,
        grads: &[(usize, Tensor<f32>)],
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, grad) in grads {
            let param = &mut model.params_mut()[*idx];
            if grad.shape() != param.value.shape() {
                return Err(Error::InvalidInput(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    grad.shape(),
                    param.id,
                    param.value.shape()
                )));
            }
            let m = self.m[*idx].data_mut();
            let v = self.v[*idx].data_mut();
            let w = param.value.data_mut();
            for ((w, (m, v)), g) in w
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(grad.data())
            {
                let g = *g as f64;
                let m_new = self.beta1 * (*m as f64) + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * (*v as f64) + (1.0 - self.beta2) * g * g;
                *m = m_new as f32;
                *v = v_new as f32;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                *w = ((*w as f64) - lr * m_hat / (v_hat.sqrt() + self.epsilon)) as f32;
            }
        }
        Ok(())
    }
}

/// Global l2 norm of all gradients, accumulated in f64.
pub fn global_grad_norm(grads: &[(usize, Tensor<f32>)]) -> f64 {
    let mut sum = 0.0f64;
    for (_, g) in grads {
        for &v in g.data() {
            sum += (v as f64) * (v as f64);
        }
    }
    sum.sqrt()
}

/// Scale every gradient by `clip / norm` when the global norm exceeds the
/// clip; otherwise leave them untouched, bit for bit. Returns the pre-clip
/// norm.
pub fn clip_gradients(grads: &mut [(usize, Tensor<f32>)], clip: f64) -> Result<f64> {
    let norm = global_grad_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {norm}")));
    }
    if norm > clip {
        let scale = (clip / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// Apply the configured prox to every scoped matrix at `lr * lambda`, then
/// zero `b1` entries whose `w1` row died. No-op when the coefficient is
/// zero or no regularizer is set.
pub fn prox_update(model: &mut TransformerModel<f32>, cfg: &TrainConfig, lr: f64) -> Result<()> {
    let Some((kind, lambda)) = cfg.reg else {
        return Ok(());
    };
    if lambda == 0.0 {
        return Ok(());
    }
    let step = ProxStepSize::new(lr * lambda)?;
    for idx in scoped_params(model, cfg.scope) {
        let value = &mut model.params_mut()[idx].value;
        let rows = value.rows();
        for r in 0..rows {
            let row_f64: Vec<f64> = value.row(r).iter().map(|&v| v as f64).collect();
            let out = match kind {
                RegKind::L21 => l21_prox_row(&row_f64, step)?,
                RegKind::LInf1 => linf_prox_row(&row_f64, step)?,
            };
            for (slot, v) in value.row_mut(r).iter_mut().zip(out) {
                *slot = v as f32;
            }
        }
        let id = model.params()[idx].id.clone();
        if let Some(base) = id.strip_suffix(".w1") {
            couple_bias_to_rows(model, &format!("{base}.w1"), &format!("{base}.b1"))?;
        }
    }
    Ok(())
}

/// Zero bias entries whose weight row is entirely zero.
fn couple_bias_to_rows(model: &mut TransformerModel<f32>, w_id: &str, b_id: &str) -> Result<()> {
    let w_idx = model
        .param_index(w_id)
        .ok_or_else(|| Error::InvalidInput(format!("no parameter named {w_id}")))?;
    let b_idx = model
        .param_index(b_id)
        .ok_or_else(|| Error::InvalidInput(format!("no parameter named {b_id}")))?;
    let dead: Vec<usize> = {
        let w = &model.params()[w_idx].value;
        (0..w.rows())
            .filter(|&r| w.row(r).iter().all(|&v| v == 0.0))
            .collect()
    };
    let b = model.params_mut()[b_idx].value.data_mut();
    for r in dead {
        b[r] = 0.0;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimization step over one batch. The dropout stream is derived
/// from the config seed and the global step index, so a run is exactly
/// reproducible.
pub fn train_step(
    model: &mut TransformerModel<f32>,
    adam: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    global_step: u64,
) -> Result<StepOutcome> {
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(u64::MAX - global_step);
    let mut g = Graph::train(dropout_rng);
    let (logits, loss) = model.batch_loss(&mut g, batch, cfg.label_smoothing)?;
    if !g.value(logits).all_finite() {
        return Err(Error::Divergence(format!(
            "non-finite logits at step {global_step}"
        )));
    }
    let loss_value = g.value(loss).data()[0] as f64;
    if !loss_value.is_finite() {
        return Err(Error::Divergence(format!(
            "loss is {loss_value} at step {global_step}"
        )));
    }
    let grads = g.backward(loss)?;
    let mut pg = grads.param_grads(&g);
    pg.sort_by_key(|(idx, _)| *idx);
    let grad_norm = clip_gradients(&mut pg, cfg.clip_norm)?;
    adam.update(model, &pg, lr)?;
    prox_update(model, cfg, lr)?;
    Ok(StepOutcome {
        loss: loss_value,
        grad_norm,
    })
}

/// What the plateau schedule decided after seeing a dev loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleAction {
    Continue,
    Decayed(f64),
    Stop,
}

/// Halve-on-plateau learning rate control. The patience counter resets on
/// every decay, so the rate gets a full window at each level.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr: f64,
    decay: f64,
    patience: usize,
    floor: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, decay: f64, patience: usize, floor: f64) -> Self {
        PlateauSchedule {
            lr,
            decay,
            patience,
            floor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, dev_loss: f64) -> ScheduleAction {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.stale = 0;
            return ScheduleAction::Continue;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return ScheduleAction::Continue;
        }
        self.stale = 0;
        self.lr *= self.decay;
        if self.lr < self.floor {
            ScheduleAction::Stop
        } else {
            ScheduleAction::Decayed(self.lr)
        }
    }
}

/// Mean unsmoothed negative log-likelihood per non-pad label token.
/// Perplexity is its exponential.
pub fn mean_nll(model: &TransformerModel<f32>, batches: &[Batch]) -> Result<f64> {
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for batch in batches {
        let mut g = Graph::eval();
        let (_, loss) = model.batch_loss(&mut g, batch, 0.0)?;
        let active = batch.active_labels().iter().filter(|&&a| a).count();
        total_nll += g.value(loss).data()[0] as f64 * active as f64;
        total_tokens += active;
    }
    if total_tokens == 0 {
        return Err(Error::InvalidInput(
            "no active label tokens to evaluate".to_string(),
        ));
    }
    Ok(total_nll / total_tokens as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct EvalMetrics {
    pub loss: f64,
    pub ppl: f64,
    /// Fraction of pairs whose greedy decode reproduces the target exactly.
    pub sequence_accuracy: f64,
}

/// Loss, perplexity, and greedy sequence accuracy over a pair list.
pub fn evaluate(
    model: &TransformerModel<f32>,
    pairs: &[SentencePair],
    batch_size: usize,
) -> Result<EvalMetrics> {
    let batches = sequential_batches(pairs, batch_size)?;
    let loss = mean_nll(model, &batches)?;
    let max_tgt = pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0);
    let decode_cap = (max_tgt + 1).min(model.config().max_len - 1);
    let mut correct = 0usize;
    for chunk in pairs.chunks(batch_size) {
        let srcs: Vec<Vec<u32>> = chunk
            .iter()
            .map(|p| {
                let mut s = p.src.clone();
                s.push(crate::model::EOS_ID);
                s
            })
            .collect();
        let decoded = model.greedy_decode_batch(&srcs, decode_cap)?;
        for (pair, out) in chunk.iter().zip(decoded) {
            if out == pair.tgt {
                correct += 1;
            }
        }
    }
    Ok(EvalMetrics {
        loss,
        ppl: loss.exp(),
        sequence_accuracy: correct as f64 / pairs.len() as f64,
    })
}

/// Per-epoch log line data.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_ppl: f64,
    pub lr: f64,
    pub zero_row_fraction: f64,
    pub regularizer_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    LrFloor,
    EpochCap,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev loss.
    pub best: TransformerModel<f32>,
    /// Parameters as they stood when training stopped.
    pub last: TransformerModel<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stop: StopReason,
}

/// Sum of the configured regularizer over the scoped matrices, for logging.
pub fn scoped_regularizer_value(model: &TransformerModel<f32>, cfg: &TrainConfig) -> Result<f64> {
    let Some((kind, _)) = cfg.reg else {
        return Ok(0.0);
    };
    let mut total = 0.0;
    for idx in scoped_params(model, cfg.scope) {
        total += regularizer_value(&model.params()[idx].value, kind)?;
    }
    Ok(total)
}

/// Full training run: epochs of shuffled batches, a dev pass per epoch,
/// plateau-based learning rate decay, and best-checkpoint tracking.
pub fn train_loop(
    model: &mut TransformerModel<f32>,
    train_pairs: &[SentencePair],
    dev_pairs: &[SentencePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() || dev_pairs.is_empty() {
        return Err(Error::InvalidInput(
            "training needs non-empty train and dev sets".to_string(),
        ));
    }
    let mut adam = AdamState::new(model);
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.lr_decay, cfg.patience, cfg.lr_floor);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(5);
    let dev_batches = sequential_batches(dev_pairs, cfg.batch_size)?;
    let mut history = Vec::new();
    let mut best_params: Vec<Parameter<f32>> = model.params().to_vec();
    let mut best_dev_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut global_step = 0u64;
    let mut stop = StopReason::EpochCap;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr();
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for batch in shuffled_batches(train_pairs, cfg.batch_size, &mut shuffle_rng)? {
            let outcome = train_step(model, &mut adam, &batch, cfg, lr, global_step)?;
            global_step += 1;
            loss_sum += outcome.loss;
            steps += 1;
        }
        let dev_loss = mean_nll(model, &dev_batches)?;
        if !dev_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "dev loss is {dev_loss} after epoch {epoch}"
            )));
        }
        let census = row_census(model, cfg.scope, 0.0);
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            dev_loss,
            dev_ppl: dev_loss.exp(),
            lr,
            zero_row_fraction: census.zero_fraction(),
            regularizer_value: scoped_regularizer_value(model, cfg)?,
        });
        if dev_loss < best_dev_loss {
            best_dev_loss = dev_loss;
            best_epoch = epoch;
            best_params = model.params().to_vec();
        }
        if let ScheduleAction::Stop = schedule.observe(dev_loss) {
            stop = StopReason::LrFloor;
            break;
        }
    }
    let best = TransformerModel::from_parts(model.config().clone(), best_params)?;
    Ok(TrainOutcome {
        best,
        last: model.clone(),
        history,
        best_epoch,
        best_dev_loss,
        stop,
    })
}
