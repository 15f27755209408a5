//! Row census, regularization scopes, and structural pruning.
//!
//! The regularizers act on rows of the auto-sized matrices. A [`Scope`]
//! names which sublayers participate: one side of the model or both,
//! feed-forward matrices only or attention projections too. The census
//! counts rows that are exactly zero (or within a tolerance), and pruning
//! turns zero feed-forward rows into genuinely smaller matrices, rewriting
//! the config so the shrunken model stands on its own.
//!
//! Pruning is conservative about whole sublayers: only a sublayer whose
//! every parameter, biases included, is zero gets replaced by a
//! pass-through marker. A feed-forward whose units all died but whose
//! output bias survives keeps one inert unit so the bias still applies.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameter, TransformerModel, BOS_ID};
use crate::tensor::{Scalar, Tensor};

/// Which side of the encoder-decoder the regularizer touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScopeSide {
    Encoder,
    Decoder,
    Both,
}

/// Which sublayer kinds inside that side participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScopeKind {
    /// Feed-forward matrices only.
    Ffn,
    /// Feed-forward and attention projection matrices.
    All,
}

/// Selection of auto-sized matrices, written `side-kind`, for example
/// `both-ffn` or `decoder-all`. Cross-attention belongs to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scope {
    pub side: ScopeSide,
    pub kind: ScopeKind,
}

pub const ALL_SCOPES: [Scope; 6] = [
    Scope {
        side: ScopeSide::Encoder,
        kind: ScopeKind::Ffn,
    },
    Scope {
        side: ScopeSide::Encoder,
        kind: ScopeKind::All,
    },
    Scope {
        side: ScopeSide::Decoder,
        kind: ScopeKind::Ffn,
    },
    Scope {
        side: ScopeSide::Decoder,
        kind: ScopeKind::All,
    },
    Scope {
        side: ScopeSide::Both,
        kind: ScopeKind::Ffn,
    },
    Scope {
        side: ScopeSide::Both,
        kind: ScopeKind::All,
    },
];

impl Scope {
    pub fn parse(s: &str) -> Result<Scope> {
        let (side, kind) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("scope must be side-kind, got {s}")))?;
        let side = match side {
            "encoder" => ScopeSide::Encoder,
            "decoder" => ScopeSide::Decoder,
            "both" => ScopeSide::Both,
            other => return Err(Error::Config(format!("unknown scope side {other}"))),
        };
        let kind = match kind {
            "ffn" => ScopeKind::Ffn,
            "all" => ScopeKind::All,
            other => return Err(Error::Config(format!("unknown scope kind {other}"))),
        };
        Ok(Scope { side, kind })
    }

    /// Whether a parameter id like `dec.1.ffn.w1` falls inside this scope.
    /// Only meaningful for auto-sized matrices; biases and norms never match.
    pub fn selects(&self, param_id: &str) -> bool {
        let side_ok = match self.side {
            ScopeSide::Encoder => param_id.starts_with("enc."),
            ScopeSide::Decoder => param_id.starts_with("dec."),
            ScopeSide::Both => param_id.starts_with("enc.") || param_id.starts_with("dec."),
        };
        if !side_ok {
            return false;
        }
        let is_weight = [".wq", ".wk", ".wv", ".wo", ".w1", ".w2"]
            .iter()
            .any(|suffix| param_id.ends_with(suffix));
        if !is_weight {
            return false;
        }
        match self.kind {
            ScopeKind::Ffn => param_id.contains(".ffn."),
            ScopeKind::All => true,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            ScopeSide::Encoder => "encoder",
            ScopeSide::Decoder => "decoder",
            ScopeSide::Both => "both",
        };
        let kind = match self.kind {
            ScopeKind::Ffn => "ffn",
            ScopeKind::All => "all",
        };
        write!(f, "{side}-{kind}")
    }
}

/// Indices of the model's parameters this scope regularizes.
pub fn scoped_params<S: Scalar>(model: &TransformerModel<S>, scope: Scope) -> Vec<usize> {
    model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.auto_sized && scope.selects(&p.id))
        .map(|(i, _)| i)
        .collect()
}

/// Number of auto-sized weight entries a scope covers in an architecture,
/// straight from the shapes. Biases are never counted.
pub fn scope_weight_count(config: &ModelConfig, scope: Scope) -> usize {
    config
        .parameter_specs()
        .iter()
        .filter(|s| s.auto_sized && scope.selects(&s.id))
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Zero-row census of one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCensus {
    pub param_id: String,
    pub rows: usize,
    pub zero_rows: usize,
}

/// Census over every matrix a scope covers.
#[derive(Clone, Debug, PartialEq)]
pub struct SizingReport {
    pub scope: String,
    pub groups: Vec<GroupCensus>,
    pub total_rows: usize,
    pub total_zero_rows: usize,
}

impl SizingReport {
    pub fn zero_fraction(&self) -> f64 {
        if self.total_rows == 0 {
            0.0
        } else {
            self.total_zero_rows as f64 / self.total_rows as f64
        }
    }
}

fn row_is_dead<S: Scalar>(row: &[S], tol: f64) -> bool {
    row.iter().all(|v| v.to_f64().abs() <= tol)
}

/// Count rows at or below `tol` in magnitude across the scoped matrices.
/// `tol = 0.0` counts exact zeros, which is what the prox steps write.
pub fn row_census<S: Scalar>(model: &TransformerModel<S>, scope: Scope, tol: f64) -> SizingReport {
    let mut groups = Vec::new();
    let mut total_rows = 0;
    let mut total_zero = 0;
    for &idx in &scoped_params(model, scope) {
        let p = &model.params()[idx];
        let rows = p.value.rows();
        let zero_rows = (0..rows)
            .filter(|&r| row_is_dead(p.value.row(r), tol))
            .count();
        total_rows += rows;
        total_zero += zero_rows;
        groups.push(GroupCensus {
            param_id: p.id.clone(),
            rows,
            zero_rows,
        });
    }
    SizingReport {
        scope: scope.to_string(),
        groups,
        total_rows,
        total_zero_rows: total_zero,
    }
}

/// What pruning did to one model.
#[derive(Clone, Debug)]
pub struct PruneSummary {
    pub model: TransformerModel<f32>,
    /// Feed-forward sublayer id to number of unit rows dropped.
    pub rows_dropped: BTreeMap<String, usize>,
    /// Sublayers newly replaced by pass-through markers.
    pub removed_sublayers: Vec<String>,
    /// Feed-forwards kept at width one because only their output bias
    /// survived.
    pub fallback_units: Vec<String>,
    pub params_before: usize,
    pub params_after: usize,
}

fn all_zero(t: &Tensor<f32>, tol: f64) -> bool {
    t.data().iter().all(|v| (*v as f64).abs() <= tol)
}

/// Drop dead feed-forward units and mark fully-zero sublayers as removed.
///
/// A unit is dead when its `w1` row is zero; its `b1` entry must be zero
/// too, otherwise the checkpoint was not produced by the coupled prox step
/// and dropping the row would change the function, so pruning refuses.
pub fn prune_model(model: &TransformerModel<f32>, tol: f64) -> Result<PruneSummary> {
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "prune tolerance must be finite and >= 0, got {tol}"
        )));
    }
    let config = model.config();
    let mut new_config = config.clone();
    let mut keep: BTreeMap<String, Parameter<f32>> = model
        .params()
        .iter()
        .map(|p| (p.id.clone(), p.clone()))
        .collect();
    let mut rows_dropped = BTreeMap::new();
    let mut removed_sublayers = Vec::new();
    let mut fallback_units = Vec::new();

    for sub_id in config.sublayer_ids() {
        if config.is_removed(&sub_id) {
            continue;
        }
        if sub_id.contains("attn") {
            let names: Vec<String> = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
                .iter()
                .map(|n| format!("{sub_id}.{n}"))
                .collect();
            if names.iter().all(|n| all_zero(&keep[n].value, tol)) {
                for n in &names {
                    keep.remove(n);
                }
                new_config.removed.insert(sub_id.clone());
                removed_sublayers.push(sub_id.clone());
            }
            continue;
        }

        let w1_id = format!("{sub_id}.w1");
        let b1_id = format!("{sub_id}.b1");
        let w2_id = format!("{sub_id}.w2");
        let b2_id = format!("{sub_id}.b2");
        let w1 = keep[&w1_id].value.clone();
        let b1 = keep[&b1_id].value.clone();
        let w2 = keep[&w2_id].value.clone();
        let b2 = keep[&b2_id].value.clone();
        let width = w1.rows();
        let d = w1.row_len();
        let mut live: Vec<usize> = Vec::new();
        for i in 0..width {
            if row_is_dead(w1.row(i), tol) {
                if (b1.data()[i] as f64).abs() > tol {
                    return Err(Error::InvalidInput(format!(
                        "unit {i} of {sub_id} has a zero weight row but bias {}; dropping it would change the function",
                        b1.data()[i]
                    )));
                }
            } else {
                live.push(i);
            }
        }
        let pos = ffn_dims_position(config, &sub_id)?;
        if live.is_empty() {
            let whole_sublayer_zero = all_zero(&w1, tol)
                && all_zero(&b1, tol)
                && all_zero(&w2, tol)
                && all_zero(&b2, tol);
            if whole_sublayer_zero {
                for id in [&w1_id, &b1_id, &w2_id, &b2_id] {
                    keep.remove(id);
                }
                new_config.ffn_dims[pos] = 0;
                new_config.removed.insert(sub_id.clone());
                removed_sublayers.push(sub_id.clone());
                rows_dropped.insert(sub_id.clone(), width);
            } else {
                // the output bias (or a stray w2 value) still matters, so
                // keep one unit that provably contributes nothing
                keep.get_mut(&w1_id).expect("present").value = Tensor::zeros(vec![1, d])?;
                keep.get_mut(&b1_id).expect("present").value = Tensor::zeros(vec![1])?;
                keep.get_mut(&w2_id).expect("present").value = Tensor::zeros(vec![d, 1])?;
                new_config.ffn_dims[pos] = 1;
                fallback_units.push(sub_id.clone());
                rows_dropped.insert(sub_id.clone(), width - 1);
            }
            continue;
        }
        if live.len() == width {
            continue;
        }
        let mut w1_rows = Vec::with_capacity(live.len() * d);
        let mut b1_vals = Vec::with_capacity(live.len());
        for &i in &live {
            w1_rows.extend_from_slice(w1.row(i));
            b1_vals.push(b1.data()[i]);
        }
        let mut w2_cols = Vec::with_capacity(d * live.len());
        for r in 0..d {
            for &i in &live {
                w2_cols.push(w2.get2(r, i));
            }
        }
        keep.get_mut(&w1_id).expect("present").value = Tensor::new(vec![live.len(), d], w1_rows)?;
        keep.get_mut(&b1_id).expect("present").value = Tensor::new(vec![live.len()], b1_vals)?;
        keep.get_mut(&w2_id).expect("present").value = Tensor::new(vec![d, live.len()], w2_cols)?;
        new_config.ffn_dims[pos] = live.len();
        rows_dropped.insert(sub_id.clone(), width - live.len());
    }

    new_config.validate()?;
    let params: Vec<Parameter<f32>> = keep.into_values().collect();
    let pruned = TransformerModel::from_parts(new_config, params)?;
    Ok(PruneSummary {
        params_before: model.parameter_count(),
        params_after: pruned.parameter_count(),
        model: pruned,
        rows_dropped,
        removed_sublayers,
        fallback_units,
    })
}

fn ffn_dims_position(config: &ModelConfig, sub_id: &str) -> Result<usize> {
    let rest = sub_id
        .strip_prefix("enc.")
        .or_else(|| sub_id.strip_prefix("dec."))
        .ok_or_else(|| Error::InvalidInput(format!("not a sublayer id: {sub_id}")))?;
    let layer: usize = rest
        .strip_suffix(".ffn")
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| Error::InvalidInput(format!("not a feed-forward id: {sub_id}")))?;
    Ok(if sub_id.starts_with("enc.") {
        layer
    } else {
        config.encoder_layers + layer
    })
}

/// Run `probes` random inputs through both models and check the logits
/// agree within `tol`. Returns the largest difference seen.
pub fn verify_prune_equivalence(
    original: &TransformerModel<f32>,
    pruned: &TransformerModel<f32>,
    probes: usize,
    seed: u64,
    tol: f64,
) -> Result<f64> {
    if original.config().vocab_size != pruned.config().vocab_size {
        return Err(Error::InvalidInput(
            "models have different vocabularies".to_string(),
        ));
    }
    let vocab = original.config().vocab_size as u32;
    let max_len = original.config().max_len.min(pruned.config().max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for probe in 0..probes {
        let src_len = rng.gen_range(1..=max_len.saturating_sub(1).clamp(1, 8));
        let src: Vec<u32> = (0..src_len).map(|_| rng.gen_range(3..vocab)).collect();
        let prefix_len = rng.gen_range(0..=max_len.saturating_sub(2).clamp(0, 6));
        let mut dec = vec![BOS_ID];
        dec.extend((0..prefix_len).map(|_| rng.gen_range(3..vocab)));
        let a = original.logits_for_prefix(&src, &dec)?;
        let b = pruned.logits_for_prefix(&src, &dec)?;
        for (x, y) in a.data().iter().zip(b.data()) {
            let diff = (*x as f64 - *y as f64).abs();
            if diff > worst {
                worst = diff;
            }
        }
        if worst > tol {
            return Err(Error::Equivalence(format!(
                "probe {probe}: pruned logits differ by {worst:e}, tolerance {tol:e}"
            )));
        }
    }
    Ok(worst)
}
