use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use epifnp::checkpoint::{load_model, save_model};
use epifnp::data::{parse_csv, parse_season_label, season_label, season_prefix, segment_seasons, Epiweek, SeasonSeries, WiliRecord, SEASON_START_WEEK};
use epifnp::evaluation::{choose_mode, evaluate as run_evaluation, EvalConfig, Mode};
use epifnp::inference::{ForecastOptions, Forecaster, Interval};
use epifnp::metrics::{summarize, Dispersion};
use epifnp::trainer::{train as fit, TrainedModel, TrainingLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const OUTPUT_VERSION: u32 = 1;
pub const FORECAST_LEVELS: [f64; 4] = [0.5, 0.8, 0.9, 0.95];

fn read_records(path: &Path, region: &str) -> Result<Vec<WiliRecord>, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("data file {} not found", path.display())));
    }
    let parsed = parse_csv(path, region)?;
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    Ok(parsed.records)
}

fn complete_seasons(records: &[WiliRecord]) -> Result<Vec<SeasonSeries>, CliError> {
    Ok(segment_seasons(records)?.seasons)
}

fn select(seasons: &[SeasonSeries], labels: &[String]) -> Result<Vec<SeasonSeries>, CliError> {
    labels
        .iter()
        .map(|l| {
            let year = parse_season_label(l)?;
            seasons
                .iter()
                .find(|s| s.start_year == year)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("season {l} is not a complete season in the data")))
        })
        .collect()
}

pub fn train(config: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let records = read_records(data, &cfg.region)?;
    let all = complete_seasons(&records)?;
    let seasons = match &cfg.train_seasons {
        Some(labels) => select(&all, labels)?,
        None => all,
    };
    if seasons.is_empty() {
        return Err(CliError::Usage(format!(
            "no complete seasons for region {} in {}",
            cfg.region,
            data.display()
        )));
    }
    log::info!(
        "training on {} seasons ({} .. {})",
        seasons.len(),
        seasons[0].id,
        seasons[seasons.len() - 1].id
    );
    let (model, log) = fit(&seasons, &cfg.hyperparams)?;
    fs::create_dir_all(out)?;
    save_model(&out.join("model.bin"), &model)?;
    fs::write(out.join("train_log.csv"), training_log_csv(&log))?;
    log::info!(
        "best epoch {} of {}; wrote {}",
        log.best_epoch,
        log.epochs.len(),
        out.join("model.bin").display()
    );
    Ok(())
}

pub fn training_log_csv(log: &TrainingLog) -> String {
    let mut s = String::from("epoch,train_loss,validation_loss,train_rmse\n");
    for e in &log.epochs {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.validation_loss, e.train_rmse);
    }
    s
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "nat")]
    pub region: String,
    /// Season label, e.g. `2014/15`.
    #[arg(long)]
    pub season: String,
    /// Calendar week of the last observation.
    #[arg(long)]
    pub week: u32,
    /// Weeks ahead; defaults to the model's training horizon.
    #[arg(long)]
    pub k: Option<usize>,
    /// Roll a one-step model forward instead of forecasting directly.
    #[arg(long)]
    pub ar: bool,
    /// Write every realized draw to this CSV file.
    #[arg(long)]
    pub draws: Option<PathBuf>,
    /// Forecast document path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct ForecastDocument {
    format_version: u32,
    season: String,
    as_of: String,
    target: String,
    horizon: usize,
    mode: Mode,
    point: f64,
    intervals: Vec<Interval>,
    components: usize,
    draws: usize,
}

fn as_of_week(start_year: i32, week: u32) -> Result<Epiweek, CliError> {
    let year = if week >= SEASON_START_WEEK { start_year } else { start_year + 1 };
    Ok(Epiweek::new(year, week)?)
}

fn load(path: &Path) -> Result<TrainedModel, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("model file {} not found", path.display())));
    }
    Ok(load_model(path)?)
}

pub fn forecast(args: &ForecastArgs) -> Result<(), CliError> {
    let model = load(&args.model)?;
    let k = args.k.unwrap_or(model.hyperparams.horizon);
    if k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    let mode = if args.ar {
        if model.hyperparams.horizon != 1 {
            return Err(CliError::Usage(format!(
                "--ar needs a one-step model; this one was trained at k = {}",
                model.hyperparams.horizon
            )));
        }
        Mode::Autoregressive
    } else if model.hyperparams.horizon == k {
        Mode::Direct
    } else {
        return Err(CliError::Usage(format!(
            "model was trained at k = {}; use --ar with a one-step model for k = {k}",
            model.hyperparams.horizon
        )));
    };
    let start_year = parse_season_label(&args.season)?;
    let as_of = as_of_week(start_year, args.week)?;
    let records = read_records(&args.data, &args.region)?;
    let prefix = season_prefix(&records, start_year, as_of)?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let forecaster = Forecaster::new(&model)?;
    let opts = ForecastOptions::from_hyperparams(&model.hyperparams);
    let dist = match mode {
        Mode::Direct => forecaster.forecast(&prefix, &opts, &mut rng)?,
        Mode::Autoregressive => forecaster.autoregressive(&prefix, k, opts.samples, &mut rng)?,
    };
    let summary = dist.summary(&FORECAST_LEVELS)?;
    if summary.intervals.iter().any(|i| i.few_draws) {
        log::warn!("only {} draws back the interval estimates", summary.draws);
    }
    let mut target = as_of;
    for _ in 0..k {
        target = target.next();
    }
    let doc = ForecastDocument {
        format_version: OUTPUT_VERSION,
        season: season_label(start_year),
        as_of: as_of.to_string(),
        target: target.to_string(),
        horizon: k,
        mode,
        point: summary.point,
        intervals: summary.intervals,
        components: summary.components,
        draws: summary.draws,
    };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Usage(e.to_string()))?;
    match &args.out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    if let Some(p) = &args.draws {
        let mut s = String::from("draw\n");
        for d in &dist.draws {
            let _ = writeln!(s, "{d}");
        }
        fs::write(p, s)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "nat")]
    pub region: String,
    /// Comma-separated held-out season labels.
    #[arg(long)]
    pub seasons: String,
    /// Comma-separated horizons.
    #[arg(long)]
    pub k: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

#[derive(Debug, Serialize)]
struct HorizonReport {
    horizon: usize,
    mode: Mode,
    records: usize,
    rmse: f64,
    mape: f64,
    mape_excluded: usize,
    ls: f64,
    cs: f64,
    dispersion: Dispersion,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    format_version: u32,
    seasons: Vec<String>,
    horizons: Vec<HorizonReport>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let horizons: Vec<usize> = split_list(&args.k)
        .iter()
        .map(|k| match k.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(CliError::Usage(format!("invalid horizon `{k}`"))),
        })
        .collect::<Result<_, _>>()?;
    if horizons.is_empty() {
        return Err(CliError::Usage("no horizons given".into()));
    }
    let labels = split_list(&args.seasons);
    if labels.is_empty() {
        return Err(CliError::Usage("no evaluation seasons given".into()));
    }
    let model = load(&args.model)?;
    let modes: Vec<Mode> = horizons
        .iter()
        .map(|&k| choose_mode(&model, k))
        .collect::<Result<_, _>>()?;
    let records = read_records(&args.data, &args.region)?;
    let seasons = select(&complete_seasons(&records)?, &labels)?;
    if let Some(s) = seasons
        .iter()
        .find(|s| model.references.seasons.iter().any(|r| r.start_year == s.start_year))
    {
        return Err(CliError::Usage(format!(
            "season {} was used for training and cannot be evaluated",
            s.id
        )));
    }

    let opts = ForecastOptions::from_hyperparams(&model.hyperparams);
    let mut metrics = String::from("horizon,rmse,mape,ls,cs\n");
    let mut report = EvaluationReport {
        format_version: OUTPUT_VERSION,
        seasons: seasons.iter().map(|s| s.id.clone()).collect(),
        horizons: Vec::new(),
    };
    let mut curves = Vec::new();
    for (&k, &mode) in horizons.iter().zip(&modes) {
        let cfg = EvalConfig {
            horizon: k,
            mode,
            options: opts,
            candidates: opts.samples,
            first_target: None,
            seed: args.seed,
        };
        let recs = run_evaluation(&model, &seasons, &cfg)?;
        let s = summarize(k, &recs)?;
        if s.dispersion == Dispersion::OverWide {
            log::warn!(
                "k = {k}: intervals are far too wide (CS {:.3} with coverage above every level)",
                s.calibration_score
            );
        }
        let _ = writeln!(metrics, "{},{},{},{},{}", k, s.rmse, s.mape, s.log_score, s.calibration_score);
        let mut curve = String::from("c,k\n");
        for (c, cov) in s.curve.levels.iter().zip(&s.curve.coverage) {
            let _ = writeln!(curve, "{c:.2},{cov}");
        }
        curves.push((k, curve));
        report.horizons.push(HorizonReport {
            horizon: k,
            mode,
            records: s.records,
            rmse: s.rmse,
            mape: s.mape,
            mape_excluded: s.mape_excluded,
            ls: s.log_score,
            cs: s.calibration_score,
            dispersion: s.dispersion,
        });
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("metrics.csv"), metrics)?;
    for (k, curve) in curves {
        fs::write(args.out.join(format!("calibration_k{k}.csv")), curve)?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(args.out.join("summary.json"), json + "\n")?;
    print!("{}", fs::read_to_string(args.out.join("metrics.csv"))?);
    Ok(())
}
