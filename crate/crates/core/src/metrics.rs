//! Point and probabilistic forecast scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{normal_cdf, quantile_sorted, PredictiveDistribution};

/// Per-record ceiling on the log score.
pub const LOG_SCORE_CAP: f64 = 10.0;
/// Half-width of the scoring bin around the truth.
pub const LOG_SCORE_HALF_WIDTH: f64 = 0.5;
/// Number of steps in the confidence grid `0.00, 0.01, ..., 1.00`.
pub const GRID_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub season: String,
    /// Observed prefix length.
    pub week: usize,
    pub horizon: usize,
    pub truth: f64,
    pub distribution: PredictiveDistribution,
}

fn nonempty<T>(records: &[T], what: &str) -> Result<()> {
    if records.is_empty() {
        Err(Error::contract(format!("{what}: no records")))
    } else {
        Ok(())
    }
}

/// RMSE of `(truth, prediction)` pairs.
pub fn rmse_pairs(pairs: &[(f64, f64)]) -> Result<f64> {
    nonempty(pairs, "rmse")?;
    let mse = pairs.iter().map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

/// RMSE of the mixture means.
pub fn rmse(records: &[EvaluationRecord]) -> Result<f64> {
    rmse_pairs(&point_pairs(records))
}

fn point_pairs(records: &[EvaluationRecord]) -> Vec<(f64, f64)> {
    records.iter().map(|r| (r.truth, r.distribution.mean())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub value: f64,
    /// Records skipped because their truth was zero.
    pub excluded: usize,
}

pub fn mape_pairs(pairs: &[(f64, f64)]) -> Result<Mape> {
    nonempty(pairs, "mape")?;
    let kept: Vec<f64> = pairs
        .iter()
        .filter(|(y, _)| *y != 0.0)
        .map(|(y, p)| (y - p).abs() / y.abs())
        .collect();
    let excluded = pairs.len() - kept.len();
    if excluded > 0 {
        log::warn!("mape: excluded {excluded} records with zero truth");
    }
    if kept.is_empty() {
        return Err(Error::contract("mape: every truth is zero"));
    }
    Ok(Mape {
        value: kept.iter().sum::<f64>() / kept.len() as f64,
        excluded,
    })
}

pub fn mape(records: &[EvaluationRecord]) -> Result<Mape> {
    mape_pairs(&point_pairs(records))
}

/// `-ln P(y - 0.5 <= Y <= y + 0.5)` under the mixture, capped.
pub fn log_score_one(dist: &PredictiveDistribution, y: f64) -> f64 {
    let mass: f64 = dist
        .means
        .iter()
        .zip(&dist.log_vars)
        .map(|(mu, lv)| {
            let sd = (0.5 * lv).exp();
            // upper tail differences keep precision far above the mean
            if y - mu > 0.0 {
                normal_cdf((mu - y + LOG_SCORE_HALF_WIDTH) / sd) - normal_cdf((mu - y - LOG_SCORE_HALF_WIDTH) / sd)
            } else {
                normal_cdf((y + LOG_SCORE_HALF_WIDTH - mu) / sd) - normal_cdf((y - LOG_SCORE_HALF_WIDTH - mu) / sd)
            }
        })
        .sum::<f64>()
        / dist.means.len() as f64;
    if mass > 0.0 {
        (-mass.ln()).min(LOG_SCORE_CAP)
    } else {
        LOG_SCORE_CAP
    }
}

pub fn log_score(records: &[EvaluationRecord]) -> Result<f64> {
    nonempty(records, "log score")?;
    Ok(records.iter().map(|r| log_score_one(&r.distribution, r.truth)).sum::<f64>() / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
}

pub fn confidence_grid() -> Vec<f64> {
    (0..=GRID_STEPS).map(|i| i as f64 / GRID_STEPS as f64).collect()
}

/// Which grid levels' equal-tailed intervals contain `truth`.
fn covered(dist: &PredictiveDistribution, truth: f64, grid: &[f64]) -> Result<Vec<bool>> {
    if dist.draws.is_empty() {
        return Err(Error::contract("calibration: distribution has no draws"));
    }
    let sorted = dist.sorted_draws();
    Ok(grid
        .iter()
        .map(|&c| {
            let lo = quantile_sorted(&sorted, (1.0 - c) / 2.0);
            let hi = quantile_sorted(&sorted, (1.0 + c) / 2.0);
            lo <= truth && truth <= hi
        })
        .collect())
}

/// Fraction of truths inside the equal-tailed `c` interval, for every `c`
/// on the 0.01 grid.
pub fn calibration_curve(records: &[EvaluationRecord]) -> Result<CalibrationCurve> {
    nonempty(records, "calibration curve")?;
    let grid = confidence_grid();
    let mut hits = vec![0usize; grid.len()];
    for r in records {
        if !r.truth.is_finite() {
            return Err(Error::contract(format!("calibration: truth {} is not finite", r.truth)));
        }
        for (h, c) in hits.iter_mut().zip(covered(&r.distribution, r.truth, &grid)?) {
            *h += c as usize;
        }
    }
    let n = records.len() as f64;
    let coverage: Vec<f64> = hits.iter().map(|&h| h as f64 / n).collect();
    if coverage.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::numeric("calibration curve is not monotone; intervals are not nested"));
    }
    Ok(CalibrationCurve { levels: grid, coverage })
}

/// `0.01 * sum_c |k(c) - c|` over the grid.
pub fn calibration_score(curve: &CalibrationCurve) -> Result<f64> {
    if curve.levels.len() != GRID_STEPS + 1 || curve.coverage.len() != curve.levels.len() {
        return Err(Error::contract(format!(
            "calibration score needs the full {}-point grid",
            GRID_STEPS + 1
        )));
    }
    Ok(curve
        .levels
        .iter()
        .zip(&curve.coverage)
        .map(|(c, k)| (k - c).abs())
        .sum::<f64>()
        / GRID_STEPS as f64)
}

/// Systematic miscalibration of a calibration curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dispersion {
    Calibrated,
    /// Intervals cover far more often than their level.
    OverWide,
    /// Intervals cover far less often than their level.
    OverNarrow,
}

/// Signed area `0.01 * sum_c (k(c) - c)` beyond which a curve is flagged.
pub const DISPERSION_THRESHOLD: f64 = 0.25;

pub fn dispersion(curve: &CalibrationCurve) -> Dispersion {
    let signed = curve
        .levels
        .iter()
        .zip(&curve.coverage)
        .map(|(c, k)| k - c)
        .sum::<f64>()
        / GRID_STEPS as f64;
    if signed > DISPERSION_THRESHOLD {
        Dispersion::OverWide
    } else if signed < -DISPERSION_THRESHOLD {
        Dispersion::OverNarrow
    } else {
        Dispersion::Calibrated
    }
}

/// Scores for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub horizon: usize,
    pub rmse: f64,
    pub mape: f64,
    pub log_score: f64,
    pub calibration_score: f64,
    pub records: usize,
    pub mape_excluded: usize,
    pub dispersion: Dispersion,
    pub curve: CalibrationCurve,
}

pub fn summarize(horizon: usize, records: &[EvaluationRecord]) -> Result<MetricSummary> {
    let curve = calibration_curve(records)?;
    let m = mape(records)?;
    Ok(MetricSummary {
        horizon,
        rmse: rmse(records)?,
        mape: m.value,
        log_score: log_score(records)?,
        calibration_score: calibration_score(&curve)?,
        records: records.len(),
        mape_excluded: m.excluded,
        dispersion: dispersion(&curve),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(y: f64, p: f64) -> EvaluationRecord {
        EvaluationRecord {
            season: "2000/01".into(),
            week: 1,
            horizon: 1,
            truth: y,
            distribution: PredictiveDistribution {
                means: vec![p],
                log_vars: vec![0.0],
                draws: vec![p],
            },
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[point(1.0, 1.0), point(2.0, 2.0)]).unwrap(), 0.0);
        let r = rmse_pairs(&[(3.0, 0.0), (4.0, 0.0)]).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
        let r2 = rmse_pairs(&[(6.0, 0.0), (8.0, 0.0)]).unwrap();
        assert!((r2 - 2.0 * r).abs() < 1e-14);
        assert!(rmse(&[]).is_err());
    }

    #[test]
    fn mape_examples() {
        let m = mape_pairs(&[(2.0, 1.0), (4.0, 5.0)]).unwrap();
        assert!((m.value - 0.375).abs() < 1e-15);
        let m2 = mape_pairs(&[(4.0, 2.0), (8.0, 10.0)]).unwrap();
        assert!((m2.value - m.value).abs() < 1e-15);
        let z = mape_pairs(&[(0.0, 1.0), (2.0, 1.0)]).unwrap();
        assert_eq!(z.excluded, 1);
        assert!((z.value - 0.5).abs() < 1e-15);
        assert!(mape_pairs(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn log_score_cases() {
        let std_normal = PredictiveDistribution {
            means: vec![0.0],
            log_vars: vec![0.0],
            draws: vec![0.0],
        };
        let expect = -(normal_cdf(0.5) - normal_cdf(-0.5)).ln();
        assert!((log_score_one(&std_normal, 0.0) - expect).abs() < 1e-12);
        assert!((expect - 0.9599).abs() < 1e-4);
        let narrow = PredictiveDistribution {
            means: vec![0.0],
            log_vars: vec![(1e-3f64).ln() * 2.0],
            draws: vec![0.0],
        };
        assert!(log_score_one(&narrow, 0.0) < 1e-12);
        assert_eq!(log_score_one(&narrow, 20.0), LOG_SCORE_CAP);
        assert_eq!(log_score_one(&narrow, -20.0), LOG_SCORE_CAP);
    }

    #[test]
    fn calibration_extremes() {
        let grid = confidence_grid();
        let never = CalibrationCurve {
            levels: grid.clone(),
            coverage: vec![0.0; grid.len()],
        };
        assert!((calibration_score(&never).unwrap() - 0.505).abs() < 1e-12);
        let always = CalibrationCurve {
            levels: grid.clone(),
            coverage: vec![1.0; grid.len()],
        };
        assert!((calibration_score(&always).unwrap() - 0.505).abs() < 1e-12);
        assert_eq!(dispersion(&always), Dispersion::OverWide);
        assert_eq!(dispersion(&never), Dispersion::OverNarrow);
        let perfect = CalibrationCurve {
            levels: grid.clone(),
            coverage: grid.clone(),
        };
        assert_eq!(calibration_score(&perfect).unwrap(), 0.0);
        assert_eq!(dispersion(&perfect), Dispersion::Calibrated);
        let short = CalibrationCurve {
            levels: vec![0.0, 1.0],
            coverage: vec![0.0, 1.0],
        };
        assert!(calibration_score(&short).is_err());
    }

    #[test]
    fn median_truth_is_always_covered() {
        let rec = EvaluationRecord {
            truth: 2.0,
            distribution: PredictiveDistribution {
                means: vec![2.0],
                log_vars: vec![0.0],
                draws: vec![1.0, 2.0, 3.0],
            },
            ..point(0.0, 0.0)
        };
        let curve = calibration_curve(&[rec]).unwrap();
        assert!(curve.coverage.iter().all(|&k| k == 1.0));
        let miss = EvaluationRecord {
            truth: 9.0,
            ..point(0.0, 0.0)
        };
        let curve = calibration_curve(&[miss]).unwrap();
        assert!(curve.coverage.iter().all(|&k| k == 0.0));
    }
}
