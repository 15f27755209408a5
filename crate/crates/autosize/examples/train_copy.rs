//! Train a small transformer on the copy task until it decodes the dev
//! set essentially perfectly, then watch the row-norm regularizer carve
//! feed-forward units out of the same architecture.

use autosize::data::{generate, DataConfig, Task};
use autosize::model::{ModelConfig, TransformerModel};
use autosize::sizing::{row_census, Scope, ScopeKind, ScopeSide};
use autosize::train::{evaluate, train_loop, TrainConfig};
use autosize::RegKind;

fn main() -> autosize::Result<()> {
    let data_cfg = DataConfig {
        task: Task::Copy,
        vocab_size: 16,
        min_len: 2,
        max_len: 8,
        train: 512,
        dev: 64,
        test: 64,
        seed: 7,
    };
    let splits = generate(&data_cfg)?;
    let model_cfg = ModelConfig::uniform(1, 1, 32, 2, 32, 16, 16, 0.0);
    let scope = Scope {
        side: ScopeSide::Both,
        kind: ScopeKind::Ffn,
    };
    let train_cfg = TrainConfig {
        epochs: 15,
        batch_size: 32,
        lr: 3e-3,
        scope,
        seed: 11,
        ..TrainConfig::default()
    };

    println!("plain training:");
    let mut plain = TransformerModel::init(model_cfg.clone(), 5)?;
    let outcome = train_loop(&mut plain, &splits.train, &splits.dev, &train_cfg)?;
    for rec in outcome.history.iter().step_by(3) {
        println!(
            "  epoch {:>2}  train_loss {:.4}  dev_ppl {:.4}",
            rec.epoch, rec.train_loss, rec.dev_ppl
        );
    }
    let metrics = evaluate(&outcome.best, &splits.dev, train_cfg.batch_size)?;
    println!(
        "  best epoch {}  dev_ppl {:.4}  dev seq accuracy {:.1}%",
        outcome.best_epoch,
        outcome.best_dev_loss.exp(),
        metrics.sequence_accuracy * 100.0
    );

    println!("same run with the row-norm regularizer at 3.0:");
    let mut sparse = TransformerModel::init(model_cfg, 5)?;
    let reg_cfg = TrainConfig {
        reg: Some((RegKind::L21, 3.0)),
        ..train_cfg.clone()
    };
    let reg_outcome = train_loop(&mut sparse, &splits.train, &splits.dev, &reg_cfg)?;
    let census = row_census(&reg_outcome.last, scope, 0.0);
    println!(
        "  dev_ppl {:.4}  feed-forward rows zeroed {}/{} ({:.0}%)",
        reg_outcome.best_dev_loss.exp(),
        census.total_zero_rows,
        census.total_rows,
        census.zero_fraction() * 100.0
    );
    for group in &census.groups {
        println!(
            "    {:<16} {:>3} of {:>3} rows zero",
            group.param_id, group.zero_rows, group.rows
        );
    }
    Ok(())
}
