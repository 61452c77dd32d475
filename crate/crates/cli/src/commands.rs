use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hidformer::config::{RunConfig, KEYS};
use hidformer::data::{prepare, read_csv, write_split_csv, PreparedData, PriceSeries};
use hidformer::evaluation::{
    aggregate_runs, evaluate, mann_whitney_u, write_backtest_csv, write_metrics_csv,
    write_predictions_csv, Evaluation, MetricsRow, Predictor, METRICS_HEADER,
};
use hidformer::fmt::{format_f64, format_opt};
use hidformer::training::{load_checkpoint, save_checkpoint, train, write_history, Checkpoint};
use sha2::{Digest, Sha256};

use crate::args::{BacktestArgs, Baseline, EvalArgs, Overrides, RunsArgs, TrainArgs};
use crate::error::{CliError, ExitStatus};

pub const MANIFEST_FILE: &str = "run_manifest.txt";

/// The input file's bytes together with their digest, so the digest in
/// the manifest always describes exactly what was parsed.
struct DataFile {
    path: PathBuf,
    symbol: String,
    bytes: Vec<u8>,
    sha256: String,
}

impl DataFile {
    fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let symbol = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            path: path.to_path_buf(),
            symbol,
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes,
        })
    }

    fn series(&self) -> Result<PriceSeries, CliError> {
        let loaded = read_csv(self.bytes.as_slice(), &self.symbol)?;
        if loaded.skipped > 0 {
            log::warn!(
                "{}: skipped {} null rows",
                self.path.display(),
                loaded.skipped
            );
        }
        Ok(loaded.series)
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create_file(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn load_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::new(
                ExitStatus::Config,
                "config",
                format!("{}: {e}", path.display()),
            )
        })?;
        cfg.apply_text(&text)?;
    }
    for (key, value) in overrides.pairs() {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(
    out: &Path,
    command: &str,
    data: &DataFile,
    seeds: &[u64],
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&format!(
        "tool=hidformer\nversion={}\n",
        env!("CARGO_PKG_VERSION")
    ));
    text.push_str(&format!("command={command}\n"));
    text.push_str(&format!("data={}\n", data.path.display()));
    text.push_str(&format!("data_sha256={}\n", data.sha256));
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    text.push_str(&format!("seeds={}\n", seeds.join(",")));
    text.push_str(&format!("out={}\n", out.display()));
    for key in KEYS {
        text.push_str(&format!(
            "config.{key}={}\n",
            cfg.get(key).unwrap_or_default()
        ));
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn prepare_data(series: &PriceSeries, cfg: &RunConfig) -> Result<PreparedData, CliError> {
    Ok(prepare(
        series,
        cfg.split_fraction,
        &cfg.window(),
        cfg.stats_scope,
    )?)
}

/// Trains on `data` with `cfg` and writes the checkpoint, history and
/// dataset export under `out`.
fn train_into(out: &Path, prepared: &PreparedData, cfg: &RunConfig) -> Result<String, CliError> {
    write_with(&out.join("dataset.csv"), |w| {
        write_split_csv(w, &prepared.train_bars, &prepared.val_bars)
    })?;
    log::info!(
        "training on {} windows ({} validation windows held out)",
        prepared.train.len(),
        prepared.val.len()
    );
    let outcome = train(&prepared.train, &cfg.model, &cfg.train)?;
    save_checkpoint(&outcome.best, cfg, out.join("checkpoint"))?;
    write_with(&out.join("history.csv"), |w| {
        write_history(w, &outcome.history)
    })?;
    let best = outcome
        .best_epoch
        .map(|e| e.to_string())
        .unwrap_or_else(|| "NA".into());
    let loss = outcome
        .best_epoch
        .map(|e| format_f64(outcome.history[e - 1].selection_loss))
        .unwrap_or_else(|| "NA".into());
    Ok(format!("best_epoch={best} selection_loss={loss}"))
}

pub fn cmd_train(args: &TrainArgs) -> Result<String, CliError> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let data = DataFile::read(&args.data)?;
    create_dir(&args.out)?;
    write_manifest(&args.out, "train", &data, &[cfg.seed()], &cfg)?;
    let prepared = prepare_data(&data.series()?, &cfg)?;
    train_into(&args.out, &prepared, &cfg)
}

/// Loads a checkpoint and checks `overrides` against its configuration.
/// Only `metrics_scale` may differ, since it does not affect the model.
fn open_checkpoint(dir: &Path, overrides: &Overrides) -> Result<(Checkpoint, RunConfig), CliError> {
    let ckpt = load_checkpoint(dir)?;
    let mut requested = ckpt.config;
    for (key, value) in overrides.pairs() {
        requested.set(key, value)?;
    }
    let mut comparable = requested;
    comparable.metrics_scale = ckpt.config.metrics_scale;
    ckpt.ensure_matches(&comparable)?;
    Ok((ckpt, requested))
}

fn metrics_row(symbol: &str, run: &str, seed: u64, eval: &Evaluation) -> MetricsRow {
    MetricsRow {
        symbol: symbol.to_string(),
        run: run.to_string(),
        seed,
        accuracy: eval.accuracy,
        final_net_value: eval.backtest.final_net_value,
        risk: eval.backtest.risk,
    }
}

fn write_eval_outputs(out: &Path, row: &MetricsRow, eval: &Evaluation) -> Result<(), CliError> {
    write_with(&out.join("metrics.csv"), |w| {
        write_metrics_csv(w, std::slice::from_ref(row))
    })?;
    write_with(&out.join("predictions.csv"), |w| {
        write_predictions_csv(w, &eval.windows)
    })
}

fn accuracy_line(eval: &Evaluation) -> String {
    format!(
        "mae={} mse={} mape={}",
        format_f64(eval.accuracy.mae),
        format_f64(eval.accuracy.mse),
        format_opt(eval.accuracy.mape)
    )
}

fn summary_line(eval: &Evaluation) -> String {
    let b = &eval.backtest;
    format!(
        "final_net_value={} sharpe={} max_drawdown={} volatility={}",
        format_f64(b.final_net_value),
        format_opt(b.risk.sharpe),
        format_f64(b.risk.max_drawdown),
        format_opt(b.risk.volatility)
    )
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String, CliError> {
    let (ckpt, cfg) = open_checkpoint(&args.checkpoint, &args.overrides)?;
    let data = DataFile::read(&args.data)?;
    create_dir(&args.out)?;
    write_manifest(&args.out, "eval", &data, &[cfg.seed()], &cfg)?;
    let prepared = prepare_data(&data.series()?, &cfg)?;
    let predictor = if args.self_test {
        Predictor::Oracle
    } else {
        Predictor::Model(&ckpt.params)
    };
    let eval = evaluate(predictor, &prepared, cfg.metrics_scale)?;
    let run = if args.self_test { "self-test" } else { "eval" };
    let row = metrics_row(&data.symbol, run, cfg.seed(), &eval);
    write_eval_outputs(&args.out, &row, &eval)?;
    Ok(accuracy_line(&eval))
}

pub fn cmd_backtest(args: &BacktestArgs) -> Result<String, CliError> {
    let (ckpt, cfg) = open_checkpoint(&args.checkpoint, &args.overrides)?;
    let data = DataFile::read(&args.data)?;
    create_dir(&args.out)?;
    write_manifest(&args.out, "backtest", &data, &[cfg.seed()], &cfg)?;
    let prepared = prepare_data(&data.series()?, &cfg)?;
    let predictor = if args.oracle {
        Predictor::Oracle
    } else {
        Predictor::Model(&ckpt.params)
    };
    let eval = evaluate(predictor, &prepared, cfg.metrics_scale)?;
    write_with(&args.out.join("backtest.csv"), |w| {
        write_backtest_csv(w, &eval.series, &eval.backtest)
    })?;
    let mut lines = vec![summary_line(&eval)];
    if let Some(Baseline::Persistence) = args.baseline {
        let base = evaluate(Predictor::Persistence, &prepared, cfg.metrics_scale)?;
        write_with(&args.out.join("backtest_persistence.csv"), |w| {
            write_backtest_csv(w, &base.series, &base.backtest)
        })?;
        lines.push(format!("baseline {}", summary_line(&base)));
    }
    Ok(lines.join("\n"))
}

/// Metric values of a row in [`METRICS_HEADER`] order, skipping the
/// identifying columns.
fn metric_values(row: &MetricsRow) -> Vec<Option<f64>> {
    vec![
        Some(row.accuracy.mae),
        Some(row.accuracy.mse),
        row.accuracy.mape,
        Some(row.final_net_value),
        row.risk.volatility,
        Some(row.risk.max_drawdown),
        row.risk.sharpe,
    ]
}

/// Metric columns, without `symbol,run,seed`.
const METRIC_NAMES: &[&str] = METRICS_HEADER.split_at(3).1;

fn write_aggregate(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let mut header = vec!["kind", "symbol", "run", "seed", "k"];
    header.extend(METRIC_NAMES);
    let se: Vec<String> = METRIC_NAMES.iter().map(|m| format!("{m}_se")).collect();
    header.extend(se.iter().map(String::as_str));
    header.push("single_run");

    let mut lines = vec![header.join(",")];
    for row in rows {
        let mut fields = vec![
            "run".to_string(),
            row.symbol.clone(),
            row.run.clone(),
            row.seed.to_string(),
            "1".into(),
        ];
        fields.extend(metric_values(row).into_iter().map(format_opt));
        fields.extend(std::iter::repeat_n(
            "NA".to_string(),
            METRIC_NAMES.len() + 1,
        ));
        lines.push(fields.join(","));
    }

    let k = rows.len();
    let mut means = Vec::new();
    let mut ses = Vec::new();
    for m in 0..METRIC_NAMES.len() {
        // a metric undefined in any run stays undefined in the summary
        let values: Option<Vec<f64>> = rows.iter().map(|r| metric_values(r)[m]).collect();
        match values.map(|v| aggregate_runs(&v)) {
            Some(Ok(agg)) => {
                means.push(format_f64(agg.mean));
                ses.push(format_f64(agg.standard_error));
            }
            _ => {
                means.push("NA".into());
                ses.push("NA".into());
            }
        }
    }
    let symbol = rows.first().map(|r| r.symbol.clone()).unwrap_or_default();
    let mut summary = vec![
        "summary".to_string(),
        symbol,
        "all".into(),
        "NA".into(),
        k.to_string(),
    ];
    summary.extend(means);
    summary.extend(ses);
    summary.push((k == 1).to_string());
    lines.push(summary.join(","));

    let text = lines.join("\n") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_significance(
    path: &Path,
    model: &[MetricsRow],
    baseline: &[MetricsRow],
) -> Result<(), CliError> {
    let mut lines = vec!["metric,n_model,n_baseline,u_model,u_baseline,p_value,method".to_string()];
    for (m, name) in METRIC_NAMES.iter().enumerate() {
        let a: Option<Vec<f64>> = model.iter().map(|r| metric_values(r)[m]).collect();
        let b: Option<Vec<f64>> = baseline.iter().map(|r| metric_values(r)[m]).collect();
        let line = match (a, b) {
            (Some(a), Some(b)) => {
                let r = mann_whitney_u(&a, &b)?;
                format!(
                    "{name},{},{},{},{},{},{}",
                    a.len(),
                    b.len(),
                    format_f64(r.u_a),
                    format_f64(r.u_b),
                    format_f64(r.p_value),
                    format!("{:?}", r.method).to_lowercase()
                )
            }
            _ => format!("{name},{},{},NA,NA,NA,NA", model.len(), baseline.len()),
        };
        lines.push(line);
    }
    let text = lines.join("\n") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn cmd_runs(args: &RunsArgs) -> Result<String, CliError> {
    if args.overrides.seed.is_some() {
        return Err(CliError::new(
            ExitStatus::Config,
            "config",
            "runs takes its seeds from --seeds, not --seed",
        ));
    }
    if args.seeds.is_empty() {
        return Err(CliError::new(
            ExitStatus::Config,
            "config",
            "--seeds needs at least one seed",
        ));
    }
    let base_cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let data = DataFile::read(&args.data)?;
    create_dir(&args.out)?;
    write_manifest(&args.out, "runs", &data, &args.seeds, &base_cfg)?;
    let series = data.series()?;

    let baseline_dir = args.out.join("baseline");
    create_dir(&baseline_dir)?;
    let prepared = prepare_data(&series, &base_cfg)?;
    let base_eval = evaluate(Predictor::Persistence, &prepared, base_cfg.metrics_scale)?;
    let base_row = metrics_row(&data.symbol, "baseline", 0, &base_eval);
    write_eval_outputs(&baseline_dir, &base_row, &base_eval)?;
    write_with(&baseline_dir.join("backtest.csv"), |w| {
        write_backtest_csv(w, &base_eval.series, &base_eval.backtest)
    })?;

    let mut model_rows = Vec::new();
    let mut baseline_rows = Vec::new();
    for (i, &seed) in args.seeds.iter().enumerate() {
        let mut cfg = base_cfg;
        cfg.set_seed(seed);
        let dir = args.out.join(format!("seed_{seed}"));
        create_dir(&dir)?;
        write_manifest(&dir, "runs", &data, &[seed], &cfg)?;
        let status = train_into(&dir, &prepared, &cfg)?;
        log::info!("seed {seed}: {status}");
        let ckpt = load_checkpoint(dir.join("checkpoint"))?;
        let eval = evaluate(Predictor::Model(&ckpt.params), &prepared, cfg.metrics_scale)?;
        let run = (i + 1).to_string();
        let row = metrics_row(&data.symbol, &run, seed, &eval);
        write_eval_outputs(&dir, &row, &eval)?;
        write_with(&dir.join("backtest.csv"), |w| {
            write_backtest_csv(w, &eval.series, &eval.backtest)
        })?;
        model_rows.push(row);
        baseline_rows.push(MetricsRow {
            run,
            seed,
            ..base_row.clone()
        });
    }

    write_aggregate(&args.out.join("aggregate.csv"), &model_rows)?;
    write_significance(
        &args.out.join("significance.csv"),
        &model_rows,
        &baseline_rows,
    )?;
    Ok(format!(
        "runs={} out={}",
        model_rows.len(),
        args.out.display()
    ))
}
