//! Command implementations behind the thin binary: prox benchmarking,
//! training with sweeps, architecture search, pruning, reporting, and
//! replay. Every run directory gets exactly one manifest naming the
//! command, the config hash, and the artifacts, and a run replayed from
//! that manifest reproduces every record file bit for bit once wall-clock
//! fields are stripped.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_model, save_model};
use crate::config::{RunConfig, SearchMode};
use crate::data::generate;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::prox::{linf_prox_row_counted, linf_prox_row_serial, ProxStepSize};
use crate::records::{self, float_field, read_records, strip_volatile, write_records, Record};
use crate::search::{
    random_search, random_search_concurrent, search_with_autosizing, SearchOutcome,
};
use crate::sizing::{prune_model, row_census, verify_prune_equivalence, PruneSummary};
use crate::train::{evaluate, train_loop, TrainOutcome};

pub const MANIFEST_FILE: &str = "manifest.records";
pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.records";
pub const SIZING_FILE: &str = "sizing.records";
pub const EVAL_FILE: &str = "eval.records";
pub const TRIALS_FILE: &str = "trials.records";
pub const FAILURES_FILE: &str = "failures.records";
pub const SUMMARY_FILE: &str = "summary.records";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Environment variable that overrides the default run-directory root.
pub const RUN_ROOT_ENV: &str = "AUTOSIZE_RUN_ROOT";

/// Run root resolution order: explicit flag, then the env var, then
/// `./runs`.
pub fn run_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Record values forbid whitespace and `=`, so free-form text is squeezed
/// before it lands in a record file.
fn sanitize_value(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_whitespace() {
                '_'
            } else if c == '=' {
                ':'
            } else {
                c
            }
        })
        .collect();
    if cleaned.is_empty() {
        "unknown".to_string()
    } else {
        cleaned
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub created_unix: u64,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config_text: &str, artifacts: Vec<String>) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command: command.to_string(),
            config_sha256: sha256_hex(config_text),
            created_unix,
            artifacts,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let record = records::record(&[
            ("command", self.command.clone()),
            ("config_sha256", self.config_sha256.clone()),
            ("created_unix", self.created_unix.to_string()),
            ("artifacts", self.artifacts.join(",")),
        ]);
        write_records(&dir.join(MANIFEST_FILE), &[record])
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Format(format!("no manifest in {}", dir.display())));
        }
        let records = read_records(&path)?;
        let [record] = records.as_slice() else {
            return Err(Error::Format(format!(
                "manifest must hold exactly one record, found {} in {}",
                records.len(),
                dir.display()
            )));
        };
        let field = |key: &str| -> Result<String> {
            record
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Format(format!("manifest missing {key}")))
        };
        Ok(RunManifest {
            command: field("command")?,
            config_sha256: field("config_sha256")?,
            created_unix: field("created_unix")?
                .parse()
                .map_err(|e| Error::Format(format!("bad created_unix: {e}")))?,
            artifacts: field("artifacts")?.split(',').map(str::to_string).collect(),
        })
    }
}

/// Create a fresh run directory. A directory that already holds a
/// manifest belongs to a finished run and is refused.
fn claim_run_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already contains a run; pick a fresh directory",
            dir.display()
        )));
    }
    Ok(())
}

/// One timing row of the prox micro-benchmark. The parallel route is
/// forced through the tree scan so the pass count reflects its structure
/// even below the serial-fallback threshold.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub workers: usize,
    pub serial_ns: u128,
    pub parallel_ns: u128,
    pub speedup: f64,
    pub pass_count: u32,
    /// Always "pass"; disagreement aborts the benchmark instead.
    pub agreement: &'static str,
}

impl BenchRow {
    pub fn to_record(&self) -> Record {
        records::record(&[
            ("n", self.n.to_string()),
            ("workers", self.workers.to_string()),
            ("serial_ns", self.serial_ns.to_string()),
            ("parallel_ns", self.parallel_ns.to_string()),
            (
                "speedup",
                float_field((self.speedup * 1000.0).round() / 1000.0),
            ),
            ("pass_count", self.pass_count.to_string()),
            ("agreement", self.agreement.to_string()),
        ])
    }
}

/// Time the serial and parallel row-max prox routes against each other on
/// random rows, checking agreement within 1e-6 on every instance.
pub fn cmd_prox_bench(sizes: &[usize], trials: usize, workers: usize) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidInput("sizes must be positive".to_string()));
    }
    if trials == 0 || workers == 0 {
        return Err(Error::InvalidInput(
            "trials and workers must be positive".to_string(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot build a {workers}-thread pool: {e}")))?;
    let mut rows = Vec::with_capacity(sizes.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE);
    for &n in sizes {
        let instances: Vec<(Vec<f64>, ProxStepSize)> = (0..trials)
            .map(|_| {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
                let l1: f64 = v.iter().map(|x| x.abs()).sum();
                let step = ProxStepSize::new(rng.gen::<f64>() * 1.5 * l1).expect("non-negative");
                (v, step)
            })
            .collect();
        let serial_start = Instant::now();
        let serial_outs: Vec<Vec<f64>> = instances
            .iter()
            .map(|(v, step)| linf_prox_row_serial(v, *step))
            .collect::<Result<_>>()?;
        let serial_ns = serial_start.elapsed().as_nanos() / trials as u128;
        let mut pass_count = 0;
        let parallel_start = Instant::now();
        let parallel_outs: Vec<Vec<f64>> = pool.install(|| {
            instances
                .iter()
                .map(|(v, step)| {
                    let (out, passes) = linf_prox_row_counted(v, *step, 2)?;
                    pass_count = pass_count.max(passes);
                    Ok(out)
                })
                .collect::<Result<_>>()
        })?;
        let parallel_ns = parallel_start.elapsed().as_nanos() / trials as u128;
        for (serial, parallel) in serial_outs.iter().zip(&parallel_outs) {
            let worst = serial
                .iter()
                .zip(parallel)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if worst > 1e-6 {
                return Err(Error::Equivalence(format!(
                    "serial and parallel prox disagree by {worst} at n={n}"
                )));
            }
        }
        rows.push(BenchRow {
            n,
            workers,
            serial_ns,
            parallel_ns,
            speedup: serial_ns as f64 / parallel_ns.max(1) as f64,
            pass_count,
            agreement: "pass",
        });
    }
    Ok(rows)
}

/// Label for one sweep entry: the baseline, or kind and coefficient.
pub fn lambda_label(kind: &str, lambda: Option<f64>) -> String {
    match lambda {
        None => "baseline".to_string(),
        Some(l) => format!("{kind}-{}", float_field(l)),
    }
}

#[derive(Clone, Debug)]
pub struct TrainRunSummary {
    pub dir: PathBuf,
    pub label: String,
    pub lambda: Option<f64>,
    pub best_dev_ppl: f64,
    pub test_seq_accuracy: f64,
    /// Zero-row fraction of the scoped matrices in the final parameters.
    pub zero_row_fraction: f64,
}

fn write_history(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    let records: Vec<Record> = outcome
        .history
        .iter()
        .map(|rec| {
            records::record(&[
                ("epoch", rec.epoch.to_string()),
                ("train_loss", float_field(rec.train_loss)),
                ("dev_loss", float_field(rec.dev_loss)),
                ("dev_ppl", float_field(rec.dev_ppl)),
                ("lr", float_field(rec.lr)),
                ("zero_row_fraction", float_field(rec.zero_row_fraction)),
                ("reg_value", float_field(rec.regularizer_value)),
            ])
        })
        .collect();
    write_records(&dir.join(HISTORY_FILE), &records)
}

fn write_sizing(
    dir: &Path,
    model: &TransformerModel<f32>,
    scope: crate::sizing::Scope,
) -> Result<f64> {
    let census = row_census(model, scope, 0.0);
    let mut rows: Vec<Record> = census
        .groups
        .iter()
        .map(|g| {
            records::record(&[
                ("param", g.param_id.clone()),
                ("rows", g.rows.to_string()),
                ("zero_rows", g.zero_rows.to_string()),
            ])
        })
        .collect();
    rows.push(records::record(&[
        ("scope", census.scope.clone()),
        ("total_rows", census.total_rows.to_string()),
        ("total_zero_rows", census.total_zero_rows.to_string()),
        ("zero_fraction", float_field(census.zero_fraction())),
    ]));
    write_records(&dir.join(SIZING_FILE), &rows)?;
    Ok(census.zero_fraction())
}

/// Train once per configured coefficient, writing one run directory per
/// entry under `out_root`. Divergence keeps the partial artifacts and the
/// manifest, then surfaces as an error.
pub fn cmd_train(config: &RunConfig, out_root: &Path) -> Result<Vec<TrainRunSummary>> {
    config.validate()?;
    let splits = generate(&config.data_config())?;
    let mut summaries = Vec::new();
    for lambda in config.lambdas() {
        let resolved = config.with_lambda(lambda);
        let label = lambda_label(&config.reg.kind, lambda);
        let dir = out_root.join(&label);
        claim_run_dir(&dir)?;
        let config_text = resolved.to_toml();
        std::fs::write(dir.join(CONFIG_FILE), &config_text)?;
        let train_cfg = resolved.train_config(lambda)?;
        let mut model = TransformerModel::init(resolved.model_config(), train_cfg.seed)?;
        let outcome = match train_loop(&mut model, &splits.train, &splits.dev, &train_cfg) {
            Ok(out) => out,
            Err(err) => {
                RunManifest::new("train", &config_text, vec![CONFIG_FILE.to_string()])
                    .write(&dir)?;
                return Err(err);
            }
        };
        write_history(&dir, &outcome)?;
        save_model(&outcome.best, &dir.join(BEST_CKPT))?;
        save_model(&outcome.last, &dir.join(LAST_CKPT))?;
        let zero_fraction = write_sizing(&dir, &outcome.last, train_cfg.scope)?;
        let test = evaluate(&outcome.best, &splits.test, train_cfg.batch_size)?;
        let eval_rows = vec![
            records::record(&[
                ("split", "dev".to_string()),
                ("label", label.clone()),
                ("loss", float_field(outcome.best_dev_loss)),
                ("ppl", float_field(outcome.best_dev_loss.exp())),
            ]),
            records::record(&[
                ("split", "test".to_string()),
                ("label", label.clone()),
                ("loss", float_field(test.loss)),
                ("ppl", float_field(test.ppl)),
                ("seq_acc", float_field(test.sequence_accuracy)),
            ]),
        ];
        write_records(&dir.join(EVAL_FILE), &eval_rows)?;
        let artifacts = vec![
            CONFIG_FILE.to_string(),
            HISTORY_FILE.to_string(),
            SIZING_FILE.to_string(),
            EVAL_FILE.to_string(),
            BEST_CKPT.to_string(),
            LAST_CKPT.to_string(),
        ];
        RunManifest::new("train", &config_text, artifacts).write(&dir)?;
        summaries.push(TrainRunSummary {
            dir,
            label,
            lambda,
            best_dev_ppl: outcome.best_dev_loss.exp(),
            test_seq_accuracy: test.sequence_accuracy,
            zero_row_fraction: zero_fraction,
        });
    }
    Ok(summaries)
}

fn compact_config(config: &crate::model::ModelConfig) -> String {
    let ffn: Vec<String> = config.ffn_dims.iter().map(|d| d.to_string()).collect();
    format!(
        "d{}-h{}-enc{}-dec{}-ffn{}",
        config.d_model,
        config.heads,
        config.encoder_layers,
        config.decoder_layers,
        ffn.join(",")
    )
}

fn trial_records(outcome: &SearchOutcome) -> (Vec<Record>, Vec<Record>) {
    let trials = outcome
        .trials
        .iter()
        .map(|t| {
            records::record(&[
                ("trial", t.trial.to_string()),
                ("arm", t.arm.name().to_string()),
                ("config", compact_config(&t.config)),
                ("dev_ppl", float_field(t.dev_ppl)),
                ("test_seq_acc", float_field(t.test_seq_accuracy)),
                ("params", t.parameter_count.to_string()),
                ("seconds", float_field(t.seconds)),
                ("rows_zero", t.rows_zero.to_string()),
                ("rows_total", t.rows_total.to_string()),
            ])
        })
        .collect();
    let failures = outcome
        .failures
        .iter()
        .map(|f| {
            records::record(&[
                ("trial", f.trial.to_string()),
                ("arm", f.arm.name().to_string()),
                ("error", sanitize_value(&f.message)),
            ])
        })
        .collect();
    (trials, failures)
}

/// Run the configured search campaign into `out_dir`: the ranked trial
/// table, any failures, a summary with cumulative time, and the best
/// checkpoint.
pub fn cmd_search(config: &RunConfig, out_dir: &Path) -> Result<SearchOutcome> {
    config.validate()?;
    let mode = config.search_mode()?;
    let space = config.search_space().expect("search section present");
    let section = config.search.as_ref().expect("search section present");
    claim_run_dir(out_dir)?;
    let config_text = config.to_toml();
    std::fs::write(out_dir.join(CONFIG_FILE), &config_text)?;
    let splits = generate(&config.data_config())?;
    let template = {
        let lambda = config.lambdas().first().copied().flatten();
        config.train_config(lambda)?
    };
    let outcome = match mode {
        SearchMode::Random if section.concurrent => {
            random_search_concurrent(&space, &splits, &template)?
        }
        SearchMode::Random => random_search(&space, &splits, &template)?,
        SearchMode::Autosizing => search_with_autosizing(
            &space,
            &splits,
            section.lambda_l21,
            section.lambda_linf,
            &template,
        )?,
    };
    let (trials, failures) = trial_records(&outcome);
    write_records(&out_dir.join(TRIALS_FILE), &trials)?;
    write_records(&out_dir.join(FAILURES_FILE), &failures)?;
    let mut summary = records::record(&[
        ("command", "search".to_string()),
        ("mode", section.mode.clone()),
        ("budget", section.budget.to_string()),
        ("trials", outcome.trials.len().to_string()),
        ("failures", outcome.failures.len().to_string()),
        (
            "cumulative_seconds",
            float_field(outcome.cumulative_seconds),
        ),
    ]);
    if let Some(best) = outcome.best() {
        summary.insert("best_trial".to_string(), best.trial.to_string());
        summary.insert("best_arm".to_string(), best.arm.name().to_string());
        summary.insert("best_dev_ppl".to_string(), float_field(best.dev_ppl));
    }
    write_records(&out_dir.join(SUMMARY_FILE), &[summary])?;
    let mut artifacts = vec![
        CONFIG_FILE.to_string(),
        TRIALS_FILE.to_string(),
        FAILURES_FILE.to_string(),
        SUMMARY_FILE.to_string(),
    ];
    if let Some(best_model) = &outcome.best_model {
        save_model(best_model, &out_dir.join(BEST_CKPT))?;
        artifacts.push(BEST_CKPT.to_string());
    }
    RunManifest::new("search", &config_text, artifacts).write(out_dir)?;
    Ok(outcome)
}

/// Prune a checkpoint, verify the pruned model matches the original on
/// random probes within 1e-5, and write the compacted checkpoint plus a
/// report. A larger deviation refuses to write and surfaces as an
/// equivalence error.
pub fn cmd_prune(
    input: &Path,
    output: &Path,
    report: &Path,
    probes: usize,
) -> Result<(PruneSummary, f64)> {
    let model = load_model(input)?;
    let summary = prune_model(&model, 0.0)?;
    let worst = verify_prune_equivalence(&model, &summary.model, probes, 0xFACE, 1e-5)?;
    save_model(&summary.model, output)?;
    let units_removed: usize = summary.rows_dropped.values().sum();
    let mut rows = vec![records::record(&[
        ("params_before", summary.params_before.to_string()),
        ("params_after", summary.params_after.to_string()),
        ("units_removed", units_removed.to_string()),
        (
            "sublayers_removed",
            if summary.removed_sublayers.is_empty() {
                "none".to_string()
            } else {
                summary.removed_sublayers.join(",")
            },
        ),
        (
            "fallback_units",
            if summary.fallback_units.is_empty() {
                "none".to_string()
            } else {
                summary.fallback_units.join(",")
            },
        ),
        ("max_logit_diff", float_field(worst)),
        ("probes", probes.to_string()),
    ])];
    for (sublayer, dropped) in &summary.rows_dropped {
        rows.push(records::record(&[
            ("sublayer", sublayer.clone()),
            ("rows_dropped", dropped.to_string()),
        ]));
    }
    write_records(report, &rows)?;
    Ok((summary, worst))
}

/// Percentage suffix for a report cell; fractions under 1% render blank.
fn format_fraction(fraction: f64) -> String {
    if fraction < 0.01 {
        String::new()
    } else {
        format!(" {}%", (fraction * 100.0).round())
    }
}

/// One cell of the consolidated report.
#[derive(Clone, Debug)]
pub struct ReportCell {
    pub kind: String,
    pub scope: String,
    pub coefficient: f64,
    pub metric: f64,
    pub fraction_deleted: f64,
}

pub struct ReportOutput {
    pub text: String,
    pub cells: Vec<Record>,
    pub warnings: Vec<String>,
}

fn read_run_cell(dir: &Path) -> Result<ReportCell> {
    RunManifest::read(dir)?;
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let eval = read_records(&dir.join(EVAL_FILE))?;
    let test = eval
        .iter()
        .find(|r| r.get("split").map(String::as_str) == Some("test"))
        .ok_or_else(|| Error::Format(format!("no test record in {}", dir.display())))?;
    let metric: f64 = test
        .get("seq_acc")
        .ok_or_else(|| Error::Format("test record lacks seq_acc".to_string()))?
        .parse()
        .map_err(|e| Error::Format(format!("bad seq_acc: {e}")))?;
    let sizing = read_records(&dir.join(SIZING_FILE))?;
    let totals = sizing
        .iter()
        .find(|r| r.contains_key("zero_fraction"))
        .ok_or_else(|| Error::Format(format!("no sizing totals in {}", dir.display())))?;
    let fraction: f64 = totals["zero_fraction"]
        .parse()
        .map_err(|e| Error::Format(format!("bad zero_fraction: {e}")))?;
    Ok(ReportCell {
        kind: config.reg.kind.clone(),
        scope: config.reg.scope.clone(),
        coefficient: config.reg.lambda.unwrap_or(0.0),
        metric,
        fraction_deleted: fraction,
    })
}

/// Consolidate train-run directories into a scope-by-coefficient matrix
/// per regularizer. Deleted fractions under 1% render blank; a zero
/// coefficient is the baseline column. Directories without a manifest are
/// skipped with a warning.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<ReportOutput> {
    let mut cells = Vec::new();
    let mut warnings = Vec::new();
    for dir in run_dirs {
        match read_run_cell(dir) {
            Ok(cell) => cells.push(cell),
            Err(err) => warnings.push(format!("skipping {}: {err}", dir.display())),
        }
    }
    cells.sort_by(|a, b| {
        a.kind.cmp(&b.kind).then(a.scope.cmp(&b.scope)).then(
            a.coefficient
                .partial_cmp(&b.coefficient)
                .expect("finite coefficients"),
        )
    });
    let mut text = String::new();
    let mut kinds: Vec<String> = cells.iter().map(|c| c.kind.clone()).collect();
    kinds.dedup();
    for kind in &kinds {
        let group: Vec<&ReportCell> = cells.iter().filter(|c| &c.kind == kind).collect();
        let mut coefficients: Vec<f64> = group.iter().map(|c| c.coefficient).collect();
        coefficients.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        coefficients.dedup();
        let mut scopes: Vec<String> = group.iter().map(|c| c.scope.clone()).collect();
        scopes.sort();
        scopes.dedup();
        text.push_str(&format!("regularizer: {kind}\n"));
        let mut header = format!("{:<14}", "scope");
        for &c in &coefficients {
            let title = if c == 0.0 {
                "baseline".to_string()
            } else {
                float_field(c)
            };
            header.push_str(&format!(" {title:<18}"));
        }
        text.push_str(header.trim_end());
        text.push('\n');
        for scope in &scopes {
            let mut line = format!("{scope:<14}");
            for &coefficient in &coefficients {
                let cell = group
                    .iter()
                    .find(|c| &c.scope == scope && c.coefficient == coefficient);
                let body = match cell {
                    Some(c) => {
                        format!("acc={:.3}{}", c.metric, format_fraction(c.fraction_deleted))
                    }
                    None => "-".to_string(),
                };
                line.push_str(&format!(" {body:<18}"));
            }
            text.push_str(line.trim_end());
            text.push('\n');
        }
        text.push('\n');
    }
    let records: Vec<Record> = cells
        .iter()
        .map(|c| {
            records::record(&[
                ("kind", c.kind.clone()),
                ("scope", c.scope.clone()),
                ("coefficient", float_field(c.coefficient)),
                (
                    "label",
                    if c.coefficient == 0.0 {
                        "baseline".to_string()
                    } else {
                        "regularized".to_string()
                    },
                ),
                ("metric", float_field(c.metric)),
                ("fraction_deleted", float_field(c.fraction_deleted)),
            ])
        })
        .collect();
    Ok(ReportOutput {
        text,
        cells: records,
        warnings,
    })
}

/// Re-run a finished run directory from its manifest into
/// `scratch_root` and compare every record artifact after stripping
/// wall-clock fields. Checkpoints must match byte for byte.
pub fn cmd_replay(run_dir: &Path, scratch_root: &Path) -> Result<()> {
    let manifest = RunManifest::read(run_dir)?;
    let config_text = std::fs::read_to_string(run_dir.join(CONFIG_FILE))?;
    if sha256_hex(&config_text) != manifest.config_sha256 {
        return Err(Error::Format(format!(
            "config.toml in {} does not match the manifest hash",
            run_dir.display()
        )));
    }
    let config = RunConfig::parse(&config_text)?;
    let replay_dir = match manifest.command.as_str() {
        "train" => {
            let runs = cmd_train(&config, scratch_root)?;
            let [run] = runs.as_slice() else {
                return Err(Error::Format(
                    "replayed train config resolved to more than one run".to_string(),
                ));
            };
            run.dir.clone()
        }
        "search" => {
            let dir = scratch_root.join("search-replay");
            cmd_search(&config, &dir)?;
            dir
        }
        other => {
            return Err(Error::Format(format!(
                "manifest command {other:?} is not replayable"
            )));
        }
    };
    for artifact in &manifest.artifacts {
        let original = run_dir.join(artifact);
        let replayed = replay_dir.join(artifact);
        if artifact.ends_with(".records") {
            let a = strip_volatile(&read_records(&original)?);
            let b = strip_volatile(&read_records(&replayed)?);
            if a != b {
                return Err(Error::Equivalence(format!(
                    "{artifact} differs between the run and its replay"
                )));
            }
        } else {
            let a = std::fs::read(&original)?;
            let b = std::fs::read(&replayed)?;
            if a != b {
                return Err(Error::Equivalence(format!(
                    "{artifact} bytes differ between the run and its replay"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> RunConfig {
        RunConfig::parse(
            r#"
            [model]
            d_model = 8
            heads = 2
            ffn_dim = 8
            max_len = 16

            [train]
            epochs = 2
            batch_size = 16
            lr = 1e-3

            [reg]
            kind = "l21"
            lambda = 0.1

            [data]
            vocab_size = 11
            min_len = 2
            max_len = 5
            train = 48
            dev = 12
            test = 12
            seed = 3
        "#,
        )
        .unwrap()
    }

    #[test]
    fn run_root_resolution_prefers_the_flag() {
        assert_eq!(
            run_root(Some(PathBuf::from("/tmp/x"))),
            PathBuf::from("/tmp/x")
        );
        // without a flag or env var the default applies; the env branch is
        // exercised through the binary tests to avoid process-global state here
        if std::env::var_os(RUN_ROOT_ENV).is_none() {
            assert_eq!(run_root(None), PathBuf::from("runs"));
        }
    }

    #[test]
    fn sha256_matches_a_known_vector() {
        assert_eq!(
            sha256_hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_roundtrips_through_its_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = RunManifest::new("train", "x = 1\n", vec!["config.toml".to_string()]);
        manifest.write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn bench_rows_report_agreement_and_log_passes() {
        let rows = cmd_prox_bench(&[16, 64], 3, 1).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.agreement, "pass");
            let log2 = (row.n as f64).log2().ceil() as u32;
            assert!(
                row.pass_count <= 4 * log2 + 4,
                "n={} passes={}",
                row.n,
                row.pass_count
            );
            assert!(row.serial_ns > 0 && row.parallel_ns > 0);
        }
    }

    #[test]
    fn bench_rejects_empty_and_zero_inputs() {
        assert!(cmd_prox_bench(&[], 1, 1).is_err());
        assert!(cmd_prox_bench(&[0], 1, 1).is_err());
        assert!(cmd_prox_bench(&[4], 0, 1).is_err());
        assert!(cmd_prox_bench(&[4], 1, 0).is_err());
    }

    #[test]
    fn train_writes_a_complete_run_directory() {
        let root = tempfile::tempdir().unwrap();
        let summaries = cmd_train(&desk_config(), root.path()).unwrap();
        assert_eq!(summaries.len(), 1);
        let run = &summaries[0];
        assert_eq!(run.label, "l21-0.1");
        for artifact in [
            MANIFEST_FILE,
            CONFIG_FILE,
            HISTORY_FILE,
            SIZING_FILE,
            EVAL_FILE,
            BEST_CKPT,
            LAST_CKPT,
        ] {
            assert!(run.dir.join(artifact).exists(), "{artifact}");
        }
        let history = read_records(&run.dir.join(HISTORY_FILE)).unwrap();
        assert_eq!(history.len(), 2);
        assert!(history[0].contains_key("dev_ppl"));
        let manifest = RunManifest::read(&run.dir).unwrap();
        assert_eq!(manifest.command, "train");
        let config_text = std::fs::read_to_string(run.dir.join(CONFIG_FILE)).unwrap();
        assert_eq!(manifest.config_sha256, sha256_hex(&config_text));
    }

    #[test]
    fn sweep_writes_one_directory_per_coefficient() {
        let mut config = desk_config();
        config.reg.lambda = None;
        config.reg.lambda_sweep = Some(vec![0.0, 0.1]);
        let root = tempfile::tempdir().unwrap();
        let summaries = cmd_train(&config, root.path()).unwrap();
        assert_eq!(summaries.len(), 2);
        assert_eq!(summaries[0].label, "l21-0");
        assert_eq!(summaries[1].label, "l21-0.1");
        assert!(summaries[0].dir.exists() && summaries[1].dir.exists());
    }

    #[test]
    fn finished_run_directories_are_refused() {
        let root = tempfile::tempdir().unwrap();
        cmd_train(&desk_config(), root.path()).unwrap();
        let err = cmd_train(&desk_config(), root.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn search_writes_trials_summary_and_best_checkpoint() {
        let mut config = desk_config();
        config.reg = Default::default();
        config.search = Some(crate::config::SearchSection {
            mode: "autosizing".to_string(),
            heads: vec![2],
            d_model: vec![8],
            encoder_layers: vec![1],
            decoder_layers: vec![1],
            ffn_dims: vec![8],
            budget: 1,
            seed: 0,
            lambda_l21: 0.5,
            lambda_linf: 5.0,
            concurrent: false,
        });
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("campaign");
        let outcome = cmd_search(&config, &dir).unwrap();
        assert_eq!(outcome.trials.len() + outcome.failures.len(), 3);
        let trials = read_records(&dir.join(TRIALS_FILE)).unwrap();
        for key in [
            "arm",
            "config",
            "dev_ppl",
            "test_seq_acc",
            "params",
            "seconds",
        ] {
            assert!(trials[0].contains_key(key), "{key}");
        }
        let summary = &read_records(&dir.join(SUMMARY_FILE)).unwrap()[0];
        assert_eq!(summary["budget"], "1");
        assert_eq!(
            summary["trials"].parse::<usize>().unwrap()
                + summary["failures"].parse::<usize>().unwrap(),
            3
        );
        assert!(dir.join(BEST_CKPT).exists());
    }

    #[test]
    fn prune_roundtrip_reports_zero_units_on_a_dense_model() {
        let root = tempfile::tempdir().unwrap();
        let summaries = cmd_train(
            &RunConfig::parse(
                "[model]\nd_model = 8\nheads = 2\nffn_dim = 8\nmax_len = 16\n\n[train]\nepochs = 1\nbatch_size = 16\nlr = 1e-4\n\n[data]\nvocab_size = 11\nmin_len = 2\nmax_len = 5\ntrain = 32\ndev = 8\ntest = 8\nseed = 3\n",
            )
            .unwrap(),
            root.path(),
        )
        .unwrap();
        let ckpt = summaries[0].dir.join(BEST_CKPT);
        let out = root.path().join("pruned.ckpt");
        let report = root.path().join("prune.records");
        let (summary, worst) = cmd_prune(&ckpt, &out, &report, 16).unwrap();
        assert_eq!(
            summary.params_before, summary.params_after,
            "dense model loses nothing"
        );
        assert!(worst <= 1e-5);
        let rows = read_records(&report).unwrap();
        assert_eq!(rows[0]["units_removed"], "0");
        assert_eq!(
            std::fs::metadata(&out).unwrap().len(),
            std::fs::metadata(&ckpt).unwrap().len(),
            "output checkpoint is the same size"
        );
    }

    #[test]
    fn report_builds_a_single_cell_table_from_one_run() {
        let root = tempfile::tempdir().unwrap();
        let summaries = cmd_train(&desk_config(), root.path()).unwrap();
        let out = cmd_report(&[summaries[0].dir.clone()]).unwrap();
        assert!(out.warnings.is_empty());
        assert_eq!(out.cells.len(), 1);
        assert_eq!(out.cells[0]["kind"], "l21");
        assert_eq!(out.cells[0]["scope"], "both-ffn");
        assert!(out.text.contains("regularizer: l21"));
        assert!(out.text.contains("both-ffn"));
    }

    #[test]
    fn report_skips_directories_without_a_manifest() {
        let root = tempfile::tempdir().unwrap();
        let empty = root.path().join("not-a-run");
        std::fs::create_dir_all(&empty).unwrap();
        let out = cmd_report(&[empty]).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.cells.is_empty());
    }

    #[test]
    fn report_blanks_fractions_under_one_percent() {
        assert_eq!(format_fraction(0.004), "");
        assert_eq!(format_fraction(0.0099), "");
        assert_eq!(format_fraction(0.01), " 1%");
        assert_eq!(format_fraction(0.25), " 25%");
        assert_eq!(format_fraction(1.0), " 100%");
    }

    #[test]
    fn replay_reproduces_a_training_run() {
        let root = tempfile::tempdir().unwrap();
        let summaries = cmd_train(&desk_config(), root.path()).unwrap();
        let scratch = tempfile::tempdir().unwrap();
        cmd_replay(&summaries[0].dir, scratch.path()).unwrap();
    }

    #[test]
    fn replay_detects_a_tampered_table() {
        let root = tempfile::tempdir().unwrap();
        let summaries = cmd_train(&desk_config(), root.path()).unwrap();
        let history = summaries[0].dir.join(HISTORY_FILE);
        let mut tampered = read_records(&history).unwrap();
        tampered[0].insert("dev_loss".to_string(), "9.9".to_string());
        write_records(&history, &tampered).unwrap();
        let scratch = tempfile::tempdir().unwrap();
        let err = cmd_replay(&summaries[0].dir, scratch.path()).unwrap_err();
        assert!(matches!(err, Error::Equivalence(_)));
    }

    #[test]
    fn labels_name_the_baseline_and_the_coefficient() {
        assert_eq!(lambda_label("l21", None), "baseline");
        assert_eq!(lambda_label("l21", Some(0.5)), "l21-0.5");
        assert_eq!(lambda_label("linf1", Some(10.0)), "linf1-10");
    }
}
