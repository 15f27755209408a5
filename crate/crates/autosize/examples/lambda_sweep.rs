//! Sweep the row-norm coefficient on the reverse task and consolidate the
//! run directories into the scope-by-coefficient comparison matrix.
//!
//! Stronger coefficients delete more feed-forward rows; the report blanks
//! cells where less than 1% of rows were deleted and labels the zero
//! coefficient as the baseline.

use autosize::commands::{cmd_report, cmd_train};
use autosize::config::RunConfig;

fn main() -> autosize::Result<()> {
    let config = RunConfig::parse(
        r#"
        [model]
        d_model = 32
        heads = 2
        ffn_dim = 32
        max_len = 16

        [train]
        epochs = 14
        batch_size = 32
        lr = 3e-3
        seed = 5

        [reg]
        kind = "l21"
        lambda_sweep = [0.0, 0.1, 1.0, 10.0]
        scope = "both-ffn"

        [data]
        task = "reverse"
        vocab_size = 16
        min_len = 2
        max_len = 6
        train = 512
        dev = 48
        test = 48
        seed = 9
    "#,
    )?;

    let root = std::env::temp_dir().join(format!("autosize-sweep-{}", std::process::id()));
    let summaries = cmd_train(&config, &root)?;
    println!(
        "{:<10} {:>8} {:>14} {:>12}",
        "label", "dev_ppl", "test_seq_acc", "rows_zeroed"
    );
    for run in &summaries {
        println!(
            "{:<10} {:>8.4} {:>14.4} {:>11.1}%",
            run.label,
            run.best_dev_ppl,
            run.test_seq_accuracy,
            run.zero_row_fraction * 100.0
        );
    }

    let dirs: Vec<_> = summaries.iter().map(|r| r.dir.clone()).collect();
    let report = cmd_report(&dirs)?;
    println!();
    print!("{}", report.text);

    let fractions: Vec<f64> = summaries.iter().map(|r| r.zero_row_fraction).collect();
    assert!(
        fractions.windows(2).all(|w| w[0] <= w[1] + 1e-12),
        "deleted fraction grows with the coefficient: {fractions:?}"
    );
    std::fs::remove_dir_all(&root).ok();
    Ok(())
}
