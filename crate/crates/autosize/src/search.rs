//! Random architecture search and the three-arm auto-sizing protocol.
//!
//! `random_search` samples configs from categorical choice sets, trains
//! each one, and ranks trials by dev perplexity. `search_with_autosizing`
//! trains every sampled config three times from byte-identical parameters
//! with the same batch order: once plain, once under the row-norm
//! regularizer, once under the row-max regularizer. Arms share nothing
//! mutable after initialization.
//!
//! Sampling is a pure function of the space seed and the draw index, so a
//! campaign replays exactly. Trial wall time is the one non-reproducible
//! field.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::prox::RegKind;
use crate::sizing::row_census;
use crate::train::{evaluate, train_loop, TrainConfig};

/// How many times an incompatible (heads, d_model) pair is redrawn before
/// sampling gives up on the space.
pub const REDRAW_CAP: usize = 100;

#[derive(Clone, Debug)]
pub struct SearchSpace {
    pub heads_choices: Vec<usize>,
    pub d_model_choices: Vec<usize>,
    pub encoder_layer_choices: Vec<usize>,
    pub decoder_layer_choices: Vec<usize>,
    pub ffn_dim_choices: Vec<usize>,
    /// Fixed across the space; sampled configs must match the dataset.
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub trial_budget: usize,
    pub seed: u64,
}

impl SearchSpace {
    /// Small sets that keep every trial trainable on a single core.
    pub fn desk() -> Self {
        SearchSpace {
            heads_choices: vec![2, 4],
            d_model_choices: vec![16, 32, 64],
            encoder_layer_choices: vec![1, 2],
            decoder_layer_choices: vec![1, 2],
            ffn_dim_choices: vec![32, 64, 128],
            vocab_size: 32,
            max_len: 32,
            dropout: 0.0,
            trial_budget: 6,
            seed: 0,
        }
    }

    /// The full-scale choice sets. Sampling from these is cheap; training
    /// the results is not, so this space is for sampling checks and for
    /// configs headed to bigger machines.
    pub fn full_scale() -> Self {
        SearchSpace {
            heads_choices: vec![4, 8, 16],
            d_model_choices: vec![128, 256, 512, 1024, 2048],
            encoder_layer_choices: vec![2, 4, 6, 8],
            decoder_layer_choices: vec![2, 4, 6, 8],
            ffn_dim_choices: vec![512, 1024, 2048],
            vocab_size: 32000,
            max_len: 256,
            dropout: 0.1,
            trial_budget: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sets: [(&str, &[usize]); 5] = [
            ("heads_choices", &self.heads_choices),
            ("d_model_choices", &self.d_model_choices),
            ("encoder_layer_choices", &self.encoder_layer_choices),
            ("decoder_layer_choices", &self.decoder_layer_choices),
            ("ffn_dim_choices", &self.ffn_dim_choices),
        ];
        for (name, set) in sets {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} must be non-empty")));
            }
            if set.iter().any(|&v| v == 0) {
                return Err(Error::Config(format!("{name} entries must be positive")));
            }
        }
        if self.trial_budget == 0 {
            return Err(Error::Config("trial_budget must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Draw one config. Heads and width are redrawn together until the head
/// count divides the width; encoder depth, decoder depth, and each layer's
/// feed-forward dim are then drawn independently.
pub fn sample_architecture(space: &SearchSpace, draw: usize) -> Result<ModelConfig> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    rng.set_stream(100 + draw as u64);
    let pick = |choices: &[usize], rng: &mut ChaCha8Rng| choices[rng.gen_range(0..choices.len())];
    for _ in 0..REDRAW_CAP {
        let heads = pick(&space.heads_choices, &mut rng);
        let d_model = pick(&space.d_model_choices, &mut rng);
        if d_model % heads != 0 {
            continue;
        }
        let encoder_layers = pick(&space.encoder_layer_choices, &mut rng);
        let decoder_layers = pick(&space.decoder_layer_choices, &mut rng);
        let ffn_dims = (0..encoder_layers + decoder_layers)
            .map(|_| pick(&space.ffn_dim_choices, &mut rng))
            .collect();
        let config = ModelConfig {
            encoder_layers,
            decoder_layers,
            d_model,
            heads,
            ffn_dims,
            vocab_size: space.vocab_size,
            max_len: space.max_len,
            dropout: space.dropout,
            removed: Default::default(),
        };
        config.validate()?;
        return Ok(config);
    }
    Err(Error::Config(format!(
        "no compatible (heads, d_model) pair found in {REDRAW_CAP} draws; \
         check that some head count divides some width"
    )))
}

/// Initialization and training seeds for one trial, derived from the space
/// seed and the draw index so arms and replays agree.
pub fn trial_seeds(space_seed: u64, draw: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(space_seed);
    rng.set_stream(200 + draw as u64);
    (rng.gen(), rng.gen())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    None,
    L21,
    LInf1,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::L21 => "l21",
            Arm::LInf1 => "linf1",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "none" => Ok(Arm::None),
            "l21" => Ok(Arm::L21),
            "linf1" => Ok(Arm::LInf1),
            other => Err(Error::Format(format!("unknown arm {other:?}"))),
        }
    }

    fn reg(self, lambda_l21: f64, lambda_linf: f64) -> Option<(RegKind, f64)> {
        match self {
            Arm::None => None,
            Arm::L21 => Some((RegKind::L21, lambda_l21)),
            Arm::LInf1 => Some((RegKind::LInf1, lambda_linf)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub trial: usize,
    pub arm: Arm,
    pub config: ModelConfig,
    pub dev_ppl: f64,
    pub test_seq_accuracy: f64,
    pub parameter_count: usize,
    pub seconds: f64,
    /// Zero rows over total rows in the scoped matrices of the best model.
    pub rows_zero: usize,
    pub rows_total: usize,
}

impl TrialRecord {
    pub fn rows_zero_fraction(&self) -> f64 {
        if self.rows_total == 0 {
            0.0
        } else {
            self.rows_zero as f64 / self.rows_total as f64
        }
    }
}

/// A trial that diverged; kept for the report, excluded from the ranking.
#[derive(Clone, Debug)]
pub struct TrialFailure {
    pub trial: usize,
    pub arm: Arm,
    pub message: String,
}

#[derive(Debug)]
pub struct SearchOutcome {
    /// Non-diverged trials, best dev perplexity first, ties broken by
    /// lower trial id and then by arm order.
    pub trials: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
    /// Exact sum of the per-trial seconds, diverged trials included.
    pub cumulative_seconds: f64,
    /// Best-dev parameters of the top-ranked trial.
    pub best_model: Option<TransformerModel<f32>>,
}

impl SearchOutcome {
    pub fn best(&self) -> Option<&TrialRecord> {
        self.trials.first()
    }
}

fn run_trial(
    trial: usize,
    arm: Arm,
    model: TransformerModel<f32>,
    cfg: &TrainConfig,
    splits: &Splits,
) -> std::result::Result<(TrialRecord, TransformerModel<f32>, f64), (TrialFailure, f64)> {
    let start = Instant::now();
    let mut model = model;
    let trained = match train_loop(&mut model, &splits.train, &splits.dev, cfg) {
        Ok(out) => out,
        Err(Error::Divergence(message)) => {
            let seconds = start.elapsed().as_secs_f64();
            return Err((
                TrialFailure {
                    trial,
                    arm,
                    message,
                },
                seconds,
            ));
        }
        Err(other) => {
            let seconds = start.elapsed().as_secs_f64();
            return Err((
                TrialFailure {
                    trial,
                    arm,
                    message: other.to_string(),
                },
                seconds,
            ));
        }
    };
    let metrics = match evaluate(&trained.best, &splits.test, cfg.batch_size) {
        Ok(m) => m,
        Err(err) => {
            let seconds = start.elapsed().as_secs_f64();
            return Err((
                TrialFailure {
                    trial,
                    arm,
                    message: err.to_string(),
                },
                seconds,
            ));
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let census = row_census(&trained.best, cfg.scope, 0.0);
    let record = TrialRecord {
        trial,
        arm,
        config: trained.best.config().clone(),
        dev_ppl: trained.best_dev_loss.exp(),
        test_seq_accuracy: metrics.sequence_accuracy,
        parameter_count: trained.best.parameter_count(),
        seconds,
        rows_zero: census.total_zero_rows,
        rows_total: census.total_rows,
    };
    Ok((record, trained.best, seconds))
}

fn rank_and_assemble(
    results: Vec<
        std::result::Result<(TrialRecord, TransformerModel<f32>, f64), (TrialFailure, f64)>,
    >,
) -> SearchOutcome {
    let mut cumulative_seconds = 0.0;
    let mut trials: Vec<(TrialRecord, TransformerModel<f32>)> = Vec::new();
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok((record, model, seconds)) => {
                cumulative_seconds += seconds;
                trials.push((record, model));
            }
            Err((failure, seconds)) => {
                cumulative_seconds += seconds;
                failures.push(failure);
            }
        }
    }
    trials.sort_by(|(a, _), (b, _)| {
        a.dev_ppl
            .partial_cmp(&b.dev_ppl)
            .expect("dev perplexities are finite")
            .then(a.trial.cmp(&b.trial))
            .then(a.arm.cmp(&b.arm))
    });
    let best_model = trials.first().map(|(_, m)| m.clone());
    SearchOutcome {
        trials: trials.into_iter().map(|(r, _)| r).collect(),
        failures,
        cumulative_seconds,
        best_model,
    }
}

/// Plan for one training run within a campaign.
struct TrialPlan {
    trial: usize,
    arm: Arm,
    model: TransformerModel<f32>,
    cfg: TrainConfig,
}

fn plan_random_search(space: &SearchSpace, template: &TrainConfig) -> Result<Vec<TrialPlan>> {
    let arm = match template.reg {
        None => Arm::None,
        Some((RegKind::L21, _)) => Arm::L21,
        Some((RegKind::LInf1, _)) => Arm::LInf1,
    };
    let mut plans = Vec::with_capacity(space.trial_budget);
    for draw in 0..space.trial_budget {
        let config = sample_architecture(space, draw)?;
        let (init_seed, train_seed) = trial_seeds(space.seed, draw);
        let model = TransformerModel::init(config, init_seed)?;
        let cfg = TrainConfig {
            seed: train_seed,
            ..template.clone()
        };
        plans.push(TrialPlan {
            trial: draw,
            arm,
            model,
            cfg,
        });
    }
    Ok(plans)
}

fn plan_autosizing(
    space: &SearchSpace,
    template: &TrainConfig,
    lambda_l21: f64,
    lambda_linf: f64,
) -> Result<Vec<TrialPlan>> {
    if !(lambda_l21 > 0.0 && lambda_linf > 0.0) {
        return Err(Error::Config(format!(
            "both coefficients must be positive, got l21 {lambda_l21} and linf1 {lambda_linf}"
        )));
    }
    let mut plans = Vec::with_capacity(space.trial_budget * 3);
    for draw in 0..space.trial_budget {
        let config = sample_architecture(space, draw)?;
        let (init_seed, train_seed) = trial_seeds(space.seed, draw);
        let shared = TransformerModel::init(config, init_seed)?;
        for arm in [Arm::None, Arm::L21, Arm::LInf1] {
            let cfg = TrainConfig {
                seed: train_seed,
                reg: arm.reg(lambda_l21, lambda_linf),
                ..template.clone()
            };
            plans.push(TrialPlan {
                trial: draw,
                arm,
                model: shared.clone(),
                cfg,
            });
        }
    }
    Ok(plans)
}

fn execute(plans: Vec<TrialPlan>, splits: &Splits, parallel: bool) -> SearchOutcome {
    let run = |plan: TrialPlan| run_trial(plan.trial, plan.arm, plan.model, &plan.cfg, splits);
    let results = if parallel {
        use rayon::prelude::*;
        plans.into_par_iter().map(run).collect()
    } else {
        plans.into_iter().map(run).collect()
    };
    rank_and_assemble(results)
}

/// Train every sampled config once with the template settings and rank by
/// dev perplexity. Diverged trials are recorded and skipped.
pub fn random_search(
    space: &SearchSpace,
    splits: &Splits,
    template: &TrainConfig,
) -> Result<SearchOutcome> {
    space.validate()?;
    template.validate()?;
    Ok(execute(plan_random_search(space, template)?, splits, false))
}

/// `random_search` with trials spread across worker threads. Rankings and
/// metrics match the sequential run; only wall times differ.
pub fn random_search_concurrent(
    space: &SearchSpace,
    splits: &Splits,
    template: &TrainConfig,
) -> Result<SearchOutcome> {
    space.validate()?;
    template.validate()?;
    Ok(execute(plan_random_search(space, template)?, splits, true))
}

/// For each sampled config, train three arms from byte-identical
/// parameters with identical batch order: no regularizer, the row-norm
/// regularizer at `lambda_l21`, and the row-max regularizer at
/// `lambda_linf`. Emits one record per arm per draw.
pub fn search_with_autosizing(
    space: &SearchSpace,
    splits: &Splits,
    lambda_l21: f64,
    lambda_linf: f64,
    template: &TrainConfig,
) -> Result<SearchOutcome> {
    space.validate()?;
    template.validate()?;
    Ok(execute(
        plan_autosizing(space, template, lambda_l21, lambda_linf)?,
        splits,
        false,
    ))
}
