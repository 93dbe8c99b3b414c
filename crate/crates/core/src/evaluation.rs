//! Rolling-origin evaluation of a trained model over whole seasons.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{eval_points, realtime_eval_points, SeasonSeries};
use crate::error::{Error, Result};
use crate::inference::{ForecastOptions, Forecaster};
use crate::metrics::EvaluationRecord;
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One forecast from a model trained at the requested horizon.
    Direct,
    /// Rollout of a one-step model.
    Autoregressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizon: usize,
    pub mode: Mode,
    pub options: ForecastOptions,
    /// Rollout candidates per step in autoregressive mode.
    pub candidates: usize,
    /// Zero-based index of the first target; `None` starts at calendar week 40.
    pub first_target: Option<usize>,
    pub seed: u64,
}

/// Picks direct mode when the model was trained for `horizon`, rollout when
/// it is a one-step model, and fails otherwise.
pub fn choose_mode(model: &TrainedModel, horizon: usize) -> Result<Mode> {
    let trained = model.hyperparams.horizon;
    if trained == horizon {
        Ok(Mode::Direct)
    } else if trained == 1 {
        Ok(Mode::Autoregressive)
    } else {
        Err(Error::contract(format!(
            "model trained for {trained}-week-ahead forecasts cannot produce horizon {horizon}"
        )))
    }
}

/// Forecasts every evaluation point of every season. Record `i` uses its
/// own RNG stream so results do not depend on evaluation order.
pub fn evaluate(model: &TrainedModel, seasons: &[SeasonSeries], cfg: &EvalConfig) -> Result<Vec<EvaluationRecord>> {
    if cfg.horizon == 0 {
        return Err(Error::contract("horizon must be at least 1"));
    }
    if cfg.mode == Mode::Direct && model.hyperparams.horizon != cfg.horizon {
        return Err(Error::contract(format!(
            "direct forecasts need a model trained at horizon {}, got {}",
            cfg.horizon, model.hyperparams.horizon
        )));
    }
    if cfg.mode == Mode::Autoregressive && model.hyperparams.horizon != 1 {
        return Err(Error::contract("autoregressive forecasts need a one-step model"));
    }
    let forecaster = Forecaster::new(model)?;
    let mut records = Vec::new();
    let mut stream = 0u64;
    for season in seasons {
        let points = match cfg.first_target {
            Some(f) => eval_points(season.len(), cfg.horizon, f),
            None => realtime_eval_points(season, cfg.horizon),
        };
        for p in points {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            stream += 1;
            let prefix = &season.values[..p.prefix_len];
            let distribution = match cfg.mode {
                Mode::Direct => forecaster.forecast(prefix, &cfg.options, &mut rng)?,
                Mode::Autoregressive => forecaster.autoregressive(prefix, cfg.horizon, cfg.candidates, &mut rng)?,
            };
            records.push(EvaluationRecord {
                season: season.id.clone(),
                week: p.prefix_len,
                horizon: cfg.horizon,
                truth: season.values[p.target_index],
                distribution,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::contract("no evaluation points in the given seasons"));
    }
    Ok(records)
}
