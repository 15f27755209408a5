//! The joint search protocol: every sampled architecture trains three
//! times from byte-identical parameters and the same batch order, once
//! plain and once per regularizer, so any metric gap is attributable to
//! the regularizer alone.

use autosize::data::{generate, DataConfig, Task};
use autosize::search::{search_with_autosizing, SearchSpace};
use autosize::sizing::{Scope, ScopeKind, ScopeSide};
use autosize::train::TrainConfig;

fn main() -> autosize::Result<()> {
    let space = SearchSpace {
        heads_choices: vec![2],
        d_model_choices: vec![16, 32],
        encoder_layer_choices: vec![1],
        decoder_layer_choices: vec![1],
        ffn_dim_choices: vec![16, 32],
        vocab_size: 16,
        max_len: 16,
        dropout: 0.0,
        trial_budget: 2,
        seed: 21,
    };
    let splits = generate(&DataConfig {
        task: Task::Copy,
        vocab_size: 16,
        min_len: 2,
        max_len: 6,
        train: 384,
        dev: 32,
        test: 32,
        seed: 13,
    })?;
    let template = TrainConfig {
        epochs: 10,
        batch_size: 32,
        lr: 3e-3,
        scope: Scope {
            side: ScopeSide::Both,
            kind: ScopeKind::Ffn,
        },
        ..TrainConfig::default()
    };

    let outcome = search_with_autosizing(&space, &splits, 3.0, 30.0, &template)?;
    println!(
        "{:>5} {:>6} {:>22} {:>8} {:>8} {:>7} {:>10}",
        "trial", "arm", "config", "dev_ppl", "acc", "params", "rows_zero"
    );
    for t in &outcome.trials {
        let ffn: Vec<String> = t.config.ffn_dims.iter().map(|d| d.to_string()).collect();
        println!(
            "{:>5} {:>6} {:>22} {:>8.4} {:>8.4} {:>7} {:>6}/{:<3}",
            t.trial,
            t.arm.name(),
            format!("d{} ffn {}", t.config.d_model, ffn.join(",")),
            t.dev_ppl,
            t.test_seq_accuracy,
            t.parameter_count,
            t.rows_zero,
            t.rows_total
        );
    }
    for f in &outcome.failures {
        println!("{:>5} {:>6} diverged: {}", f.trial, f.arm.name(), f.message);
    }
    let best = outcome.best().expect("at least one trial finished");
    println!(
        "best: trial {} arm {} at dev_ppl {:.4}; campaign took {:.1}s",
        best.trial,
        best.arm.name(),
        best.dev_ppl,
        outcome.cumulative_seconds
    );
    Ok(())
}
