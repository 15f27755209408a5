//! Train under a strong row-norm coefficient, prune the dead units, and
//! verify the compacted model still computes the same function.
//!
//! Pruning drops a `w1` row, its bias entry, and the matching `w2`
//! column for every unit the regularizer killed, so the checkpoint
//! shrinks by `2 * d_model + 1` parameters per unit while the logits
//! stay put.

use autosize::checkpoint::{load_model, save_model};
use autosize::data::{generate, DataConfig, Task};
use autosize::model::{ModelConfig, TransformerModel};
use autosize::sizing::{prune_model, verify_prune_equivalence};
use autosize::train::{train_loop, TrainConfig};
use autosize::RegKind;

fn main() -> autosize::Result<()> {
    let splits = generate(&DataConfig {
        task: Task::Copy,
        vocab_size: 16,
        min_len: 2,
        max_len: 6,
        train: 256,
        dev: 32,
        test: 32,
        seed: 2,
    })?;
    let config = ModelConfig::uniform(1, 1, 16, 2, 32, 16, 16, 0.0);
    let mut model = TransformerModel::init(config, 3)?;
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 32,
        lr: 2e-3,
        reg: Some((RegKind::L21, 6.0)),
        seed: 4,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&mut model, &splits.train, &splits.dev, &cfg)?;
    let trained = outcome.last;

    let summary = prune_model(&trained, 0.0)?;
    println!(
        "parameters {} -> {} ({} feed-forward units dropped)",
        summary.params_before,
        summary.params_after,
        summary.rows_dropped.values().sum::<usize>()
    );
    for (sublayer, dropped) in &summary.rows_dropped {
        println!("  {sublayer}: {dropped} units");
    }
    if !summary.removed_sublayers.is_empty() {
        println!(
            "  sublayers removed entirely: {}",
            summary.removed_sublayers.join(", ")
        );
    }

    let worst = verify_prune_equivalence(&trained, &summary.model, 100, 0xABCD, 1e-5)?;
    println!("worst logit deviation over 100 probes: {worst:.2e}");

    // the compacted model round-trips through its checkpoint
    let dir = std::env::temp_dir().join(format!("autosize-prune-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("pruned.ckpt");
    save_model(&summary.model, &path)?;
    let reloaded = load_model(&path)?;
    assert_eq!(reloaded.parameter_count(), summary.params_after);
    println!(
        "checkpoint holds {} parameters across {} tensors",
        reloaded.parameter_count(),
        reloaded.params().len()
    );
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
